//! Experiment runner: JSON scenario and experiment files, Monte Carlo
//! trials, RMSE tables, CSV/JSON output and gnuplot scripts.
//!
//! File formats use degrees for angles, metres, m/s and watts. Angle
//! limits and bounds are in deg². Every file carries `schema_version`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::{sp_estimate, MusicOptions};
use crate::cpd::{self, match_by_doa, CpdOptions, RecoveryOptions};
use crate::error::{Error, Result};
use crate::fisher::{fim_full_with_noise, g_vectors_closed_with_noise};
use crate::model::{
    synthesize_echo, transmission_rate, Beamforming, NoiseSpec, Scenario, SystemConfig, Target,
};
use crate::parallel::{map_indexed, stream_rng, Execution};
use crate::power::{min_achievable, optimize_power, CrlbTargets, Parameter};

pub const SCHEMA_VERSION: u32 = 1;

const DEG2_PER_RAD2: f64 = (180.0 / PI) * (180.0 / PI);

fn check_schema(found: u32, what: &str) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(Error::InvalidConfig(format!(
            "{what}: unsupported schema_version {found} (expected {SCHEMA_VERSION})"
        )));
    }
    Ok(())
}

/// System constants. Anything left out takes the reference value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub tx_elements: usize,
    pub rx_elements: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub carrier_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subcarrier_spacing_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subcarriers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cyclic_prefix_s: Option<f64>,
    /// Half a wavelength when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_spacing_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radar_noise_psd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comm_noise_psd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_power_w: Option<f64>,
}

impl ConfigFile {
    pub fn to_config(&self) -> Result<SystemConfig> {
        let mut c = SystemConfig::new(self.tx_elements, self.rx_elements);
        if let Some(f) = self.carrier_hz {
            c.carrier_hz = f;
            c.element_spacing_m = c.wavelength() / 2.0;
        }
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(
            subcarrier_spacing_hz,
            subcarriers,
            blocks,
            cyclic_prefix_s,
            element_spacing_m,
            radar_noise_psd,
            comm_noise_psd,
            total_power_w
        );
        c.validate()?;
        Ok(c)
    }

    pub fn from_config(c: &SystemConfig) -> Self {
        ConfigFile {
            tx_elements: c.tx_elements,
            rx_elements: c.rx_elements,
            carrier_hz: Some(c.carrier_hz),
            subcarrier_spacing_hz: Some(c.subcarrier_spacing_hz),
            subcarriers: Some(c.subcarriers),
            blocks: Some(c.blocks),
            cyclic_prefix_s: Some(c.cyclic_prefix_s),
            element_spacing_m: Some(c.element_spacing_m),
            radar_noise_psd: Some(c.radar_noise_psd),
            comm_noise_psd: Some(c.comm_noise_psd),
            total_power_w: Some(c.total_power_w),
        }
    }
}

fn default_rcs() -> f64 {
    0.1
}

/// One target. Give either `range_m` (split evenly between both legs) or
/// both `tx_range_m` and `rx_range_m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetFile {
    pub dod_deg: f64,
    pub doa_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx_range_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rx_range_m: Option<f64>,
    pub velocity_mps: f64,
    #[serde(default = "default_rcs")]
    pub rcs: f64,
}

impl TargetFile {
    pub fn new(dod_deg: f64, doa_deg: f64, range_m: f64, velocity_mps: f64) -> Self {
        TargetFile {
            dod_deg,
            doa_deg,
            range_m: Some(range_m),
            tx_range_m: None,
            rx_range_m: None,
            velocity_mps,
            rcs: default_rcs(),
        }
    }

    pub fn to_target(&self) -> Result<Target> {
        let (dod, doa) = (self.dod_deg.to_radians(), self.doa_deg.to_radians());
        let t = match (self.range_m, self.tx_range_m, self.rx_range_m) {
            (Some(r), None, None) => {
                Target::with_total_range(dod, doa, r, self.velocity_mps, self.rcs)
            }
            (None, Some(r1), Some(r2)) => Target {
                dod,
                doa,
                tx_range: r1,
                rx_range: r2,
                velocity: self.velocity_mps,
                rcs: self.rcs,
            },
            _ => {
                return Err(Error::InvalidConfig(
                    "a target needs either range_m or both tx_range_m and rx_range_m".into(),
                ))
            }
        };
        t.validate()?;
        Ok(t)
    }
}

/// Per-parameter limits for every target. `null` or absent leaves a
/// parameter unconstrained. Units: (m/s)², m², deg².
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doa: Option<f64>,
}

impl Limits {
    pub fn to_targets(&self) -> CrlbTargets {
        CrlbTargets {
            velocity: self.velocity.unwrap_or(f64::INFINITY),
            range: self.range.unwrap_or(f64::INFINITY),
            doa: self.doa.map_or(f64::INFINITY, |d| d / DEG2_PER_RAD2),
        }
    }
}

/// Converts a bound on `param` between file units and internal units.
pub fn to_internal(param: Parameter, v: f64) -> f64 {
    match param {
        Parameter::Doa => v / DEG2_PER_RAD2,
        _ => v,
    }
}

pub fn to_file_units(param: Parameter, v: f64) -> f64 {
    match param {
        Parameter::Doa => v * DEG2_PER_RAD2,
        _ => v,
    }
}

fn default_rel_tol() -> f64 {
    1e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Allocation {
    /// `p_T / N` on every subcarrier.
    Uniform,
    /// Rate-optimal allocation under fixed limits.
    Optimized {
        #[serde(default)]
        eta: Limits,
    },
    /// Rate-optimal allocation at the smallest feasible limit on `parameter`.
    MinAchievable {
        parameter: Parameter,
        #[serde(default)]
        others: Limits,
        #[serde(default = "default_rel_tol")]
        rel_tol: f64,
    },
}

impl Allocation {
    pub fn label(&self) -> String {
        match self {
            Allocation::Uniform => "uniform".into(),
            Allocation::Optimized { .. } => "optimized".into(),
            Allocation::MinAchievable { parameter, .. } => format!("min_{}", parameter.name()),
        }
    }

    /// Power vector for `scenario`. `swept` replaces one limit (internal units).
    pub fn resolve(
        &self,
        scenario: &Scenario,
        swept: Option<(Parameter, f64)>,
    ) -> Result<Vec<f64>> {
        let apply = |l: &Limits| {
            let base = l.to_targets();
            match swept {
                Some((p, v)) => base.with(p, v),
                None => base,
            }
        };
        match self {
            Allocation::Uniform => Ok(scenario.uniform_power()),
            Allocation::Optimized { eta } => Ok(optimize_power(scenario, &apply(eta))?.power),
            Allocation::MinAchievable {
                parameter,
                others,
                rel_tol,
            } => {
                let others = apply(others);
                let best = min_achievable(scenario, *parameter, &others, *rel_tol)?;
                Ok(optimize_power(scenario, &others.with(*parameter, best))?.power)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub config: ConfigFile,
    pub targets: Vec<TargetFile>,
    /// Half-open `[start, end)` subcarrier ranges, one per target. Even
    /// contiguous split when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub carrier_sets: Option<Vec<[usize; 2]>>,
    /// Allocation used by the `crlb` and `estimate` commands.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocation: Option<Allocation>,
}

impl ScenarioFile {
    pub fn to_scenario(&self) -> Result<Scenario> {
        check_schema(self.schema_version, "scenario")?;
        let config = self.config.to_config()?;
        let targets = self
            .targets
            .iter()
            .map(TargetFile::to_target)
            .collect::<Result<Vec<_>>>()?;
        match &self.carrier_sets {
            None => Scenario::with_even_split(config, targets),
            Some(sets) => {
                Scenario::new(config, targets, sets.iter().map(|[a, b]| *a..*b).collect())
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Power vector of the file's allocation (uniform when absent).
    pub fn power(&self, scenario: &Scenario) -> Result<Vec<f64>> {
        self.allocation
            .as_ref()
            .unwrap_or(&Allocation::Uniform)
            .resolve(scenario, None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    SnrDb,
    PT,
    EtaVelocity,
    EtaRange,
    EtaDoa,
    /// Total path length of one target (m), split evenly between legs.
    Distance,
}

impl SweepAxis {
    fn eta_parameter(self) -> Option<Parameter> {
        match self {
            SweepAxis::EtaVelocity => Some(Parameter::Velocity),
            SweepAxis::EtaRange => Some(Parameter::Range),
            SweepAxis::EtaDoa => Some(Parameter::Doa),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::SnrDb => "snr_db",
            SweepAxis::PT => "p_t",
            SweepAxis::EtaVelocity => "eta_velocity",
            SweepAxis::EtaRange => "eta_range",
            SweepAxis::EtaDoa => "eta_doa",
            SweepAxis::Distance => "distance",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Target moved by the `distance` axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Tensor decomposition.
    Cpd,
    /// MUSIC DoA, projection, then 2D-MUSIC per carrier group.
    Sp,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Cpd => "cpd",
            Estimator::Sp => "sp",
        }
    }
}

/// How per-target bounds are combined into the table's bound columns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundAggregate {
    #[default]
    Mean,
    Worst,
}

fn default_trials() -> usize {
    200
}

fn default_failure_fraction() -> f64 {
    0.1
}

fn default_allocations() -> Vec<Allocation> {
    vec![Allocation::Uniform]
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub scenario: ScenarioFile,
    pub sweep: Sweep,
    /// `[M_T, M_R]` pairs; each one reruns the sweep. Empty keeps the scenario's arrays.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub arrays: Vec<[usize; 2]>,
    #[serde(default)]
    pub estimators: Vec<Estimator>,
    #[serde(default = "default_allocations")]
    pub allocations: Vec<Allocation>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Radar noise for synthesis; the scenario's `radar_noise_psd` when
    /// omitted. Ignored on the `snr_db` axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    /// Targets whose errors and bounds enter the table; all when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets_of_interest: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "is_default")]
    pub bound_aggregate: BoundAggregate,
    /// Largest tolerated fraction of failed trials per table row.
    #[serde(default = "default_failure_fraction")]
    pub max_failure_fraction: f64,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema_version, "experiment")?;
        let scenario = self.scenario.to_scenario()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.sweep.values.is_empty() {
            return bad("sweep needs at least one value".into());
        }
        if self.sweep.values.iter().any(|v| !v.is_finite()) {
            return bad("sweep values must be finite".into());
        }
        if self.sweep.values.windows(2).any(|w| w[1] <= w[0]) {
            return bad("sweep values must be strictly increasing".into());
        }
        match self.sweep.axis {
            SweepAxis::PT
            | SweepAxis::Distance
            | SweepAxis::EtaVelocity
            | SweepAxis::EtaRange
            | SweepAxis::EtaDoa
                if self.sweep.values[0] <= 0.0 =>
            {
                return bad(format!(
                    "{} values must be positive",
                    self.sweep.axis.name()
                ));
            }
            SweepAxis::Distance => {
                let k = self.sweep.target.unwrap_or(scenario.num_targets() - 1);
                if k >= scenario.num_targets() {
                    return bad(format!("sweep target {k} does not exist"));
                }
            }
            _ => {}
        }
        if let Some(p) = self.sweep.axis.eta_parameter() {
            for a in &self.allocations {
                if matches!(a, Allocation::MinAchievable { parameter, .. } if *parameter == p) {
                    return bad(format!(
                        "cannot sweep the limit on {} while minimizing it",
                        p.name()
                    ));
                }
            }
        }
        if self.allocations.is_empty() {
            return bad("at least one allocation is required".into());
        }
        if let Some(t) = &self.targets_of_interest {
            if t.is_empty() || t.iter().any(|&k| k >= scenario.num_targets()) {
                return bad("targets_of_interest must name existing targets".into());
            }
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return bad("max_failure_fraction must lie in [0, 1]".into());
        }
        for [mt, mr] in &self.arrays {
            if *mt == 0 || *mr == 0 {
                return bad("array sizes must be positive".into());
            }
        }
        Ok(())
    }
}

/// One line of the result table. Estimator labels read
/// `<estimator>@<allocation>[/<M_T>x<M_R>]`; rows labelled `bound@...` only
/// carry bounds and rate. DoA columns are in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sweep_value: f64,
    pub estimator: String,
    pub parameter: Parameter,
    pub rmse: f64,
    pub crlb_sqrt: f64,
    pub lcrlb_sqrt: f64,
    pub rate: f64,
    pub trials_used: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub trials: usize,
    pub cpd_restarts: usize,
    pub fft_oversample: usize,
    /// 2D-MUSIC smoothing sub-block `[blocks, subcarriers]` per carrier group.
    pub smoothing_blocks: Vec<[usize; 2]>,
    /// Points that could not be evaluated (for example infeasible limits).
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub schema_version: u32,
    pub name: String,
    pub axis: SweepAxis,
    pub rows: Vec<ResultRow>,
    pub metadata: RunMetadata,
}

impl ResultTable {
    /// Error when any estimator row lost more than `max_fraction` of its trials.
    pub fn check_failure_budget(&self, max_fraction: f64) -> Result<()> {
        for r in &self.rows {
            let trials = r.trials_used + r.failures;
            if trials > 0 && r.failures as f64 > max_fraction * trials as f64 {
                return Err(Error::FailureBudget {
                    failures: r.failures,
                    trials,
                });
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        to_csv(&self.rows)
    }
}

/// Serialize `rows` as CSV with a header line.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Bounds of one target parameter, in file units (DoA in deg²).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub target: usize,
    pub parameter: Parameter,
    pub crlb: f64,
    pub lcrlb: f64,
}

/// CRLB (coupled model, matched beams) and LCRLB for every target under `p`
/// with radar noise PSD `n0`.
pub fn bound_report(scenario: &Scenario, p: &[f64], n0: f64) -> Result<Vec<BoundRow>> {
    let full = fim_full_with_noise(scenario, p, &Beamforming::matched(scenario), n0)?;
    let g = g_vectors_closed_with_noise(scenario, n0);
    let mut rows = Vec::new();
    for (k, gk) in g.iter().enumerate() {
        let l = gk.lcrlb(p)?;
        let c = &full.crlb[k];
        for (param, crlb, lcrlb) in [
            (Parameter::Velocity, c.velocity, l.velocity),
            (Parameter::Range, c.range, l.range),
            (Parameter::Doa, c.doa, l.doa),
        ] {
            rows.push(BoundRow {
                target: k,
                parameter: param,
                crlb: to_file_units(param, crlb),
                lcrlb: to_file_units(param, lcrlb),
            });
        }
    }
    Ok(rows)
}

/// Stored echo tensor; `re`/`im` follow the storage order `m + M_R (q + Q n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorFile {
    pub schema_version: u32,
    /// `[M_R, N, Q]`.
    pub dims: [usize; 3],
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub power: Vec<f64>,
    pub noise_var: Vec<f64>,
}

impl TensorFile {
    pub fn from_tensor(t: &crate::model::EchoTensor) -> Self {
        let (mr, n, q) = t.dims();
        TensorFile {
            schema_version: SCHEMA_VERSION,
            dims: [mr, n, q],
            re: t.data().iter().map(|z| z.re).collect(),
            im: t.data().iter().map(|z| z.im).collect(),
            power: t.power().to_vec(),
            noise_var: t.noise_var().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<crate::model::EchoTensor> {
        check_schema(self.schema_version, "tensor")?;
        if self.re.len() != self.im.len() {
            return Err(Error::Dimension("re and im lengths differ".into()));
        }
        let data = self
            .re
            .iter()
            .zip(&self.im)
            .map(|(&a, &b)| crate::model::C64::new(a, b))
            .collect();
        let [mr, n, q] = self.dims;
        crate::model::EchoTensor::from_parts(
            mr,
            n,
            q,
            data,
            self.power.clone(),
            self.noise_var.clone(),
        )
    }
}

/// Root mean square; NaN for an empty slice.
pub fn rmse(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return f64::NAN;
    }
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

/// Squared errors `[velocity, range, doa(deg)]` of one trial, per target of interest.
type TrialErrors = Vec<[f64; 3]>;

fn trial_errors(
    estimator: Estimator,
    echo: &crate::model::EchoTensor,
    scenario: &Scenario,
    interest: &[usize],
    seed: u64,
    stream: u64,
) -> Result<TrialErrors> {
    let truth_doa: Vec<f64> = scenario.targets.iter().map(|t| t.doa).collect();
    // estimates in truth order: (velocity, range, doa)
    let ordered: Vec<(f64, f64, f64)> = match estimator {
        Estimator::Cpd => {
            let mut rng = stream_rng(seed, stream);
            let est = cpd::estimate(
                echo,
                scenario,
                &CpdOptions::default(),
                &RecoveryOptions::default(),
                &mut rng,
            )?;
            let doas: Vec<f64> = est.targets.iter().map(|t| t.doa.value).collect();
            let perm = match_by_doa(&doas, &truth_doa);
            let mut out = vec![(0.0, 0.0, 0.0); truth_doa.len()];
            for (i, t) in est.targets.iter().enumerate() {
                out[perm[i]] = (t.velocity.value, t.range.value, t.doa.value);
            }
            out
        }
        Estimator::Sp => {
            let est = sp_estimate(echo, scenario, &MusicOptions::default())?;
            let perm = match_by_doa(&est.doa, &truth_doa);
            let mut doa = vec![0.0; truth_doa.len()];
            for (i, &k) in perm.iter().enumerate() {
                doa[k] = est.doa[i];
            }
            est.velocity_range
                .iter()
                .zip(doa)
                .map(|(&(v, r), b)| (v, r, b))
                .collect()
        }
    };
    Ok(interest
        .iter()
        .map(|&k| {
            let t = &scenario.targets[k];
            let (v, r, b) = ordered[k];
            [
                (v - t.velocity).powi(2),
                (r - t.total_range()).powi(2),
                (b - t.doa).to_degrees().powi(2),
            ]
        })
        .collect())
}

fn param_index(p: Parameter) -> usize {
    match p {
        Parameter::Velocity => 0,
        Parameter::Range => 1,
        Parameter::Doa => 2,
    }
}

fn aggregate(values: &[f64], how: BoundAggregate) -> f64 {
    match how {
        BoundAggregate::Mean => values.iter().sum::<f64>() / values.len() as f64,
        BoundAggregate::Worst => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// `[velocity, range, doa]` bounds in file units (doa in deg²), NaN when undefined.
fn bounds(
    scenario: &Scenario,
    p: &[f64],
    n0: f64,
    interest: &[usize],
    how: BoundAggregate,
) -> ([f64; 3], [f64; 3]) {
    let bf = Beamforming::matched(scenario);
    let mut crlb = [f64::NAN; 3];
    if let Ok(full) = fim_full_with_noise(scenario, p, &bf, n0) {
        let pick = |f: fn(&crate::fisher::TargetBounds) -> f64| -> Vec<f64> {
            interest.iter().map(|&k| f(&full.crlb[k])).collect()
        };
        crlb = [
            aggregate(&pick(|b| b.velocity), how),
            aggregate(&pick(|b| b.range), how),
            aggregate(&pick(|b| b.doa), how) * DEG2_PER_RAD2,
        ];
    }
    let g = g_vectors_closed_with_noise(scenario, n0);
    let l: Option<Vec<_>> = interest.iter().map(|&k| g[k].lcrlb(p).ok()).collect();
    let lcrlb = match l {
        Some(l) => [
            aggregate(&l.iter().map(|b| b.velocity).collect::<Vec<_>>(), how),
            aggregate(&l.iter().map(|b| b.range).collect::<Vec<_>>(), how),
            aggregate(&l.iter().map(|b| b.doa).collect::<Vec<_>>(), how) * DEG2_PER_RAD2,
        ],
        None => [f64::NAN; 3],
    };
    (crlb, lcrlb)
}

/// Run every sweep point, array, allocation and estimator of `spec`.
///
/// Trial `i` of a table cell draws from its own random streams, so the
/// result is identical under any `exec`.
pub fn run_experiment(spec: &ExperimentSpec, exec: Execution) -> Result<ResultTable> {
    spec.validate()?;
    let base = spec.scenario.to_scenario()?;
    let interest: Vec<usize> = spec
        .targets_of_interest
        .clone()
        .unwrap_or_else(|| (0..base.num_targets()).collect());
    let arrays: Vec<Option<[usize; 2]>> = if spec.arrays.is_empty() {
        vec![None]
    } else {
        spec.arrays.iter().copied().map(Some).collect()
    };
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    let cells_per_point = (arrays.len() * spec.allocations.len()) as u64;

    for (pi, &x) in spec.sweep.values.iter().enumerate() {
        for (ai, arr) in arrays.iter().enumerate() {
            let mut s = base.clone();
            if let Some([mt, mr]) = arr {
                s.config.tx_elements = *mt;
                s.config.rx_elements = *mr;
            }
            let mut noise = spec
                .noise
                .unwrap_or(NoiseSpec::Psd(s.config.radar_noise_psd));
            let mut swept = None;
            match spec.sweep.axis {
                SweepAxis::SnrDb => noise = NoiseSpec::SnrDb(x),
                SweepAxis::PT => s.config.total_power_w = x,
                SweepAxis::Distance => {
                    let k = spec.sweep.target.unwrap_or(s.num_targets() - 1);
                    s.targets[k].tx_range = x / 2.0;
                    s.targets[k].rx_range = x / 2.0;
                }
                axis => {
                    let p = axis.eta_parameter().expect("eta axis");
                    swept = Some((p, to_internal(p, x)));
                }
            }
            s.validate()?;
            let suffix = arr
                .map(|[mt, mr]| format!("/{mt}x{mr}"))
                .unwrap_or_default();

            for (li, alloc) in spec.allocations.iter().enumerate() {
                let alloc_label = format!("{}{suffix}", alloc.label());
                let labels: Vec<String> = if spec.estimators.is_empty() {
                    vec![format!("bound@{alloc_label}")]
                } else {
                    spec.estimators
                        .iter()
                        .map(|e| format!("{}@{alloc_label}", e.name()))
                        .collect()
                };
                let p = match alloc.resolve(&s, swept) {
                    Ok(p) => p,
                    Err(
                        e
                        @ (Error::Infeasible(_) | Error::Solver(_) | Error::SingularFisher { .. }),
                    ) => {
                        notes.push(format!(
                            "{} = {x}: {alloc_label}: {e}",
                            spec.sweep.axis.name()
                        ));
                        for label in &labels {
                            for param in Parameter::ALL {
                                rows.push(ResultRow {
                                    sweep_value: x,
                                    estimator: label.clone(),
                                    parameter: param,
                                    rmse: f64::NAN,
                                    crlb_sqrt: f64::NAN,
                                    lcrlb_sqrt: f64::NAN,
                                    rate: f64::NAN,
                                    trials_used: 0,
                                    failures: 0,
                                });
                            }
                        }
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let rate = transmission_rate(&s, &p)?.total;
                let n0 = match noise {
                    NoiseSpec::Psd(n0) => n0,
                    NoiseSpec::SnrDb(db) => s.noise_psd_for_snr(&p, db)?,
                };
                let (crlb, lcrlb) = bounds(&s, &p, n0, &interest, spec.bound_aggregate);

                let cell = (pi as u64 * cells_per_point
                    + (ai * spec.allocations.len() + li) as u64)
                    * spec.trials as u64;
                let bf = Beamforming::matched(&s);
                let trials: Vec<Vec<Result<TrialErrors>>> = if spec.estimators.is_empty() {
                    Vec::new()
                } else {
                    map_indexed(exec, spec.trials, |t| {
                        let stream = 2 * (cell + t as u64);
                        let mut rng = stream_rng(spec.seed, stream);
                        match synthesize_echo(&s, &p, &bf, noise, &mut rng) {
                            Ok(echo) => spec
                                .estimators
                                .iter()
                                .map(|&e| {
                                    trial_errors(e, &echo, &s, &interest, spec.seed, stream + 1)
                                })
                                .collect(),
                            Err(e) => spec
                                .estimators
                                .iter()
                                .map(|_| Err(Error::Estimation(e.to_string())))
                                .collect(),
                        }
                    })
                };

                for (ei, label) in labels.iter().enumerate() {
                    let ok: Vec<&TrialErrors> =
                        trials.iter().filter_map(|t| t[ei].as_ref().ok()).collect();
                    let failures = trials.len() - ok.len();
                    for param in Parameter::ALL {
                        let idx = param_index(param);
                        let errs: Vec<f64> = ok
                            .iter()
                            .flat_map(|t| t.iter().map(move |e| e[idx].sqrt()))
                            .collect();
                        rows.push(ResultRow {
                            sweep_value: x,
                            estimator: label.clone(),
                            parameter: param,
                            rmse: rmse(&errs),
                            crlb_sqrt: crlb[idx].sqrt(),
                            lcrlb_sqrt: lcrlb[idx].sqrt(),
                            rate,
                            trials_used: ok.len(),
                            failures,
                        });
                    }
                }
            }
        }
    }

    Ok(ResultTable {
        schema_version: SCHEMA_VERSION,
        name: spec.name.clone(),
        axis: spec.sweep.axis,
        rows,
        metadata: RunMetadata {
            seed: spec.seed,
            trials: spec.trials,
            cpd_restarts: CpdOptions::default().restarts,
            fft_oversample: RecoveryOptions::default().oversample,
            smoothing_blocks: base
                .carrier_sets
                .iter()
                .map(|r| [base.config.blocks.div_ceil(2), r.len().div_ceil(2)])
                .collect(),
            notes,
        },
    })
}

/// Standalone gnuplot script plotting `csv_name` (same directory).
pub fn gnuplot_script(table: &ResultTable, csv_name: &str) -> String {
    let mut labels: Vec<&str> = Vec::new();
    for r in &table.rows {
        if !labels.contains(&r.estimator.as_str()) {
            labels.push(&r.estimator);
        }
    }
    let axis = table.axis.name();
    let mut out = String::new();
    out.push_str(&format!("# {} : columns sweep_value,estimator,parameter,rmse,crlb_sqrt,lcrlb_sqrt,rate,trials_used,failures\n", table.name));
    out.push_str("set datafile separator ','\nset terminal pngcairo size 900,600\nset key outside right\nset grid\n");
    out.push_str(&format!("set xlabel '{axis}'\n"));
    let select = |label: &str, param: &str| {
        format!("'< awk -F, ''$2==\"{label}\" && $3==\"{param}\"'' {csv_name}'")
    };
    for param in Parameter::ALL {
        let name = param.name();
        let unit = match param {
            Parameter::Velocity => "m/s",
            Parameter::Range => "m",
            Parameter::Doa => "deg",
        };
        out.push_str(&format!(
            "\nset output '{}_{name}.png'\nset logscale y\nset ylabel '{name} ({unit})'\nplot \\\n",
            table.name
        ));
        let mut lines = Vec::new();
        for label in &labels {
            let src = select(label, name);
            if label.starts_with("bound@") {
                lines.push(format!(
                    "  {src} using 1:6 with linespoints title 'sqrt LCRLB {label}'"
                ));
                lines.push(format!(
                    "  {src} using 1:5 with lines dashtype 2 title 'sqrt CRLB {label}'"
                ));
            } else {
                lines.push(format!(
                    "  {src} using 1:4 with linespoints title 'RMSE {label}'"
                ));
                lines.push(format!(
                    "  {src} using 1:5 with lines dashtype 2 title 'sqrt CRLB {label}'"
                ));
            }
        }
        out.push_str(&lines.join(", \\\n"));
        out.push('\n');
    }
    out.push_str(&format!(
        "\nset output '{}_rate.png'\nunset logscale y\nset ylabel 'rate (bit per OFDM symbol)'\nplot \\\n",
        table.name
    ));
    let rate: Vec<String> = labels
        .iter()
        .map(|l| {
            format!(
                "  {} using 1:7 with linespoints title '{l}'",
                select(l, "doa")
            )
        })
        .collect();
    out.push_str(&rate.join(", \\\n"));
    out.push('\n');
    out
}

/// Write `<name>.csv`, `<name>.gp` and, with `json`, `<name>.json` to `dir`.
pub fn write_outputs(table: &ResultTable, dir: &Path, json: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{}.csv", table.name));
    fs::write(&csv_path, table.to_csv()?)?;
    let gp_path = dir.join(format!("{}.gp", table.name));
    fs::write(
        &gp_path,
        gnuplot_script(table, &format!("{}.csv", table.name)),
    )?;
    let mut out = vec![csv_path, gp_path];
    if json {
        let p = dir.join(format!("{}.json", table.name));
        fs::write(&p, serde_json::to_string_pretty(table)? + "\n")?;
        out.push(p);
    }
    Ok(out)
}

/// Scenario of the rate/bound tradeoff study (two targets, 8 × 8 arrays).
pub fn tradeoff_scenario() -> ScenarioFile {
    ScenarioFile {
        schema_version: SCHEMA_VERSION,
        name: Some("two-target tradeoff".into()),
        config: ConfigFile {
            tx_elements: 8,
            rx_elements: 8,
            ..Default::default()
        },
        targets: vec![
            TargetFile::new(30.0, 10.23, 1000.42, 19.21),
            TargetFile::new(5.0, 30.34, 1050.75, 20.36),
        ],
        carrier_sets: None,
        allocation: None,
    }
}

/// Four-target noiseless estimation scene (16 × 16 arrays).
pub fn four_target_scenario() -> ScenarioFile {
    ScenarioFile {
        schema_version: SCHEMA_VERSION,
        name: Some("four targets".into()),
        config: ConfigFile {
            tx_elements: 16,
            rx_elements: 16,
            ..Default::default()
        },
        targets: vec![
            TargetFile::new(5.0, 10.23, 1060.35, 15.86),
            TargetFile::new(18.0, 30.09, 980.24, 23.34),
            TargetFile::new(-26.0, 22.56, 1020.46, 19.67),
            TargetFile::new(-22.0, 38.85, 1070.52, 28.44),
        ],
        carrier_sets: None,
        allocation: None,
    }
}

/// Single-target (`two = false`) or two-target estimation scene, 16 × 16 arrays.
pub fn estimation_scenario(two: bool) -> ScenarioFile {
    let mut targets = vec![TargetFile::new(5.0, 10.23, 960.42, 19.21)];
    if two {
        targets.push(TargetFile::new(30.0, 30.34, 1120.75, 25.36));
    }
    ScenarioFile {
        schema_version: SCHEMA_VERSION,
        name: Some(
            if two {
                "two-target estimation"
            } else {
                "single-target estimation"
            }
            .into(),
        ),
        config: ConfigFile {
            tx_elements: 16,
            rx_elements: 16,
            ..Default::default()
        },
        targets,
        carrier_sets: None,
        allocation: None,
    }
}

pub const PRESET_NAMES: [&str; 10] = [
    "eta_doa_sweep",
    "eta_velocity_sweep",
    "eta_range_sweep",
    "min_doa_vs_power",
    "min_velocity_vs_power",
    "min_range_vs_power",
    "four_target_scatter",
    "rmse_one_target",
    "rmse_two_targets",
    "distance_sweep",
];

fn spec(
    name: &str,
    description: &str,
    scenario: ScenarioFile,
    axis: SweepAxis,
    values: Vec<f64>,
) -> ExperimentSpec {
    ExperimentSpec {
        schema_version: SCHEMA_VERSION,
        name: name.into(),
        description: description.into(),
        scenario,
        sweep: Sweep {
            axis,
            values,
            target: None,
        },
        arrays: Vec::new(),
        estimators: Vec::new(),
        allocations: default_allocations(),
        trials: default_trials(),
        seed: 1,
        noise: None,
        targets_of_interest: None,
        bound_aggregate: BoundAggregate::Mean,
        max_failure_fraction: default_failure_fraction(),
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

fn bound_sweep(
    name: &str,
    description: &str,
    axis: SweepAxis,
    values: Vec<f64>,
    allocations: Vec<Allocation>,
) -> ExperimentSpec {
    let mut s = spec(name, description, tradeoff_scenario(), axis, values);
    s.arrays = vec![[8, 8], [16, 16]];
    s.allocations = allocations;
    s.trials = 1;
    s.bound_aggregate = BoundAggregate::Worst;
    s
}

/// Built-in experiment `name` (see [`PRESET_NAMES`]).
pub fn preset(name: &str) -> Result<ExperimentSpec> {
    let optimized = vec![Allocation::Optimized {
        eta: Limits::default(),
    }];
    let min_of = |p: Parameter| {
        vec![
            Allocation::Uniform,
            Allocation::MinAchievable {
                parameter: p,
                others: Limits::default(),
                rel_tol: default_rel_tol(),
            },
        ]
    };
    let round = |v: Vec<f64>| {
        v.into_iter()
            .map(|x| (x * 1e9).round() / 1e9)
            .collect::<Vec<_>>()
    };
    Ok(match name {
        "eta_doa_sweep" => bound_sweep(
            name,
            "Rate and DoA bounds versus the DoA limit (deg^2); other limits open.",
            SweepAxis::EtaDoa,
            round(linspace(5e-4, 2e-3, 16)),
            optimized,
        ),
        "eta_velocity_sweep" => bound_sweep(
            name,
            "Rate and velocity bounds versus the velocity limit ((m/s)^2); other limits open.",
            SweepAxis::EtaVelocity,
            round(linspace(0.008, 0.03, 23)),
            optimized,
        ),
        "eta_range_sweep" => bound_sweep(
            name,
            "Rate and range bounds versus the range limit (m^2); other limits open.",
            SweepAxis::EtaRange,
            round(linspace(0.9, 2.4, 16)),
            optimized,
        ),
        "min_doa_vs_power" | "min_velocity_vs_power" | "min_range_vs_power" => {
            let param = match name {
                "min_doa_vs_power" => Parameter::Doa,
                "min_velocity_vs_power" => Parameter::Velocity,
                _ => Parameter::Range,
            };
            bound_sweep(
                name,
                &format!("Minimum achievable {} bound versus total power, optimized and uniform allocation.", param.name()),
                SweepAxis::PT,
                linspace(1.0, 10.0, 10),
                min_of(param),
            )
        }
        "four_target_scatter" => {
            let mut s = spec(
                name,
                "Four-target estimation accuracy at one SNR point.",
                four_target_scenario(),
                SweepAxis::SnrDb,
                vec![20.0],
            );
            s.estimators = vec![Estimator::Cpd];
            s.trials = 20;
            s
        }
        "rmse_one_target" | "rmse_two_targets" => {
            let mut s = spec(
                name,
                "Estimator RMSE versus SNR with uniform power.",
                estimation_scenario(name == "rmse_two_targets"),
                SweepAxis::SnrDb,
                linspace(-10.0, 20.0, 7),
            );
            s.estimators = vec![Estimator::Cpd, Estimator::Sp];
            s
        }
        "distance_sweep" => {
            let mut scenario = estimation_scenario(true);
            scenario.targets[0].range_m = Some(860.42);
            let mut s = spec(
                name,
                "Range RMSE of the moving target versus its path length, uniform power against the range-optimal allocation; absolute noise PSD.",
                scenario,
                SweepAxis::Distance,
                round(linspace(1120.75, 1690.75, 11)),
            );
            s.sweep.target = Some(1);
            s.arrays = vec![[8, 8], [16, 16]];
            s.estimators = vec![Estimator::Cpd];
            s.allocations = min_of(Parameter::Range);
            s.targets_of_interest = Some(vec![1]);
            s
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown preset '{other}' (known: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn rmse_basics() {
        assert_eq!(rmse(&[0.0, 0.0, 0.0]), 0.0);
        assert!((rmse(&[3.0, 4.0]) - 12.5f64.sqrt()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws: Vec<f64> = (0..1_000_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        assert!((rmse(&draws) - 1.0).abs() < 0.01);
        assert!(rmse(&[]).is_nan());
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESET_NAMES {
            let s = preset(name).unwrap();
            s.validate().unwrap();
            let text = serde_json::to_string_pretty(&s).unwrap();
            let back: ExperimentSpec = serde_json::from_str(&text).unwrap();
            assert_eq!(back, s, "{name}");
        }
        assert!(preset("no_such_preset").is_err());
    }

    #[test]
    fn limits_are_degrees_at_the_boundary() {
        let l = Limits {
            doa: Some(1.0),
            ..Limits::default()
        };
        let t = l.to_targets();
        assert!((t.doa - (PI / 180.0).powi(2)).abs() < 1e-18);
        assert!(t.velocity.is_infinite());
    }

    #[test]
    fn target_needs_one_range_form() {
        let mut t = TargetFile::new(5.0, 10.0, 1000.0, 3.0);
        assert_eq!(t.to_target().unwrap().tx_range, 500.0);
        t.tx_range_m = Some(400.0);
        assert!(t.to_target().is_err());
        t.range_m = None;
        t.rx_range_m = Some(700.0);
        assert_eq!(t.to_target().unwrap().total_range(), 1100.0);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = preset("rmse_one_target").unwrap();
        s.sweep.values = vec![5.0, 0.0];
        assert!(s.validate().is_err());
        let mut s = preset("rmse_one_target").unwrap();
        s.trials = 0;
        assert!(s.validate().is_err());
        let mut s = preset("rmse_one_target").unwrap();
        s.scenario.schema_version = 7;
        assert!(s.validate().is_err());
    }

    #[test]
    fn failure_budget() {
        let row = ResultRow {
            sweep_value: 0.0,
            estimator: "cpd@uniform".into(),
            parameter: Parameter::Doa,
            rmse: 0.0,
            crlb_sqrt: 0.0,
            lcrlb_sqrt: 0.0,
            rate: 0.0,
            trials_used: 8,
            failures: 2,
        };
        let t = ResultTable {
            schema_version: SCHEMA_VERSION,
            name: "t".into(),
            axis: SweepAxis::SnrDb,
            rows: vec![row],
            metadata: RunMetadata {
                seed: 0,
                trials: 10,
                cpd_restarts: 5,
                fft_oversample: 16,
                smoothing_blocks: vec![],
                notes: vec![],
            },
        };
        assert!(t.check_failure_budget(0.2).is_ok());
        assert!(matches!(
            t.check_failure_budget(0.1),
            Err(Error::FailureBudget {
                failures: 2,
                trials: 10
            })
        ));
    }
}
