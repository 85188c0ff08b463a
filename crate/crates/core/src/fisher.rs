//! Fisher information and Cramér-Rao bounds for the matched-filter echo.
//!
//! The full model treats `(f_k, τ_k, sin β_k, sin α_k)` of every target as
//! unknown and assembles `J(γ) = 2 Re[∂μ^H E^{-1} ∂μ]` numerically. The
//! decoupled model (matched beamforming, disjoint carrier sets, negligible
//! transmit leakage) has closed-form per-subcarrier information vectors
//! `g_ij`, from which the per-target bounds and the loose bounds (LCRLB)
//! follow. Amplitudes are known constants in both models.
//!
//! Natural parameters are mapped to physical ones `(v, r, β, α)` only through
//! the diagonal Jacobian `diag(1/λ, 1/c, cos β, cos α)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2, Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{steering_tx, Beamforming, CMatrix, CVector, Scenario, C64, SPEED_OF_LIGHT};

/// Conditioning limit above which a Fisher matrix is reported singular.
pub const MAX_CONDITION: f64 = 1e12;

const PARAM_NAMES: [&str; 4] = ["velocity", "range", "doa", "dod"];

/// Natural parameters of one target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NaturalParams {
    pub doppler: f64,
    pub delay: f64,
    pub doa_sine: f64,
    pub dod_sine: f64,
}

impl NaturalParams {
    pub fn of(scenario: &Scenario) -> Vec<NaturalParams> {
        scenario
            .targets
            .iter()
            .map(|t| NaturalParams {
                doppler: t.doppler(&scenario.config),
                delay: t.delay(),
                doa_sine: t.doa_sine(),
                dod_sine: t.dod_sine(),
            })
            .collect()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.doppler, self.delay, self.doa_sine, self.dod_sine]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        NaturalParams {
            doppler: a[0],
            delay: a[1],
            doa_sine: a[2],
            dod_sine: a[3],
        }
    }
}

/// Transmit gain `a_t(θ)^T w_n` with the DoD given directly as its sine.
fn tx_gains(sine: f64, bf: &Beamforming, spacing_ratio: f64) -> Vec<C64> {
    let weights = bf.weights();
    let m_t = weights.first().map_or(0, |w| w.len());
    let scale = 1.0 / (m_t as f64).sqrt();
    let at: Vec<C64> = (0..m_t)
        .map(|m| C64::from_polar(scale, -2.0 * PI * spacing_ratio * m as f64 * sine))
        .collect();
    weights
        .iter()
        .map(|w| at.iter().zip(w.iter()).map(|(a, b)| a * b).sum())
        .collect()
}

/// `∂ a_t(θ)^T w_n / ∂θ`.
fn tx_gain_derivs(sine: f64, bf: &Beamforming, spacing_ratio: f64) -> Vec<C64> {
    let weights = bf.weights();
    let m_t = weights.first().map_or(0, |w| w.len());
    let scale = 1.0 / (m_t as f64).sqrt();
    let at1: Vec<C64> = (0..m_t)
        .map(|m| {
            let k = -2.0 * PI * spacing_ratio * m as f64;
            C64::new(0.0, k) * C64::from_polar(scale, k * sine)
        })
        .collect();
    weights
        .iter()
        .map(|w| at1.iter().zip(w.iter()).map(|(a, b)| a * b).sum())
        .collect()
}

/// Noiseless mean `μ` evaluated at arbitrary natural parameters, with the
/// amplitudes, powers and beamformers of `scenario`. Ordering matches
/// [`crate::model::EchoTensor`].
pub fn mean_from_natural(
    scenario: &Scenario,
    p: &[f64],
    bf: &Beamforming,
    params: &[NaturalParams],
) -> Result<CVector> {
    let cfg = &scenario.config;
    bf.check(cfg)?;
    if params.len() != scenario.num_targets() || p.len() != cfg.subcarriers {
        return Err(Error::Dimension(
            "parameter or power vector length mismatch".into(),
        ));
    }
    let (mr, n_sc, q_count) = (cfg.rx_elements, cfg.subcarriers, cfg.blocks);
    let ratio = cfg.spacing_ratio();
    let ts = cfg.block_duration();
    let df = cfg.subcarrier_spacing_hz;
    let mut mu = CVector::zeros(mr * n_sc * q_count);
    for (t, par) in scenario.targets.iter().zip(params) {
        let amp = t.amplitude(cfg) / (mr as f64).sqrt();
        let gains = tx_gains(par.dod_sine, bf, ratio);
        for n in 0..n_sc {
            let cn = C64::from_polar(amp * p[n], -2.0 * PI * n as f64 * df * par.delay) * gains[n];
            for q in 0..q_count {
                let cq = cn * C64::from_polar(1.0, 2.0 * PI * par.doppler * q as f64 * ts);
                for m in 0..mr {
                    let sm = C64::from_polar(1.0, -2.0 * PI * ratio * m as f64 * par.doa_sine);
                    mu[m + mr * (q + q_count * n)] += cq * sm;
                }
            }
        }
    }
    Ok(mu)
}

/// Which cross-target interactions enter the derivative model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coupling {
    /// Actual beamformer gains on every subcarrier; 4 parameters per target.
    Full,
    /// Target `k` is seen only on its own carrier set with unit gain; the DoD
    /// drops out, leaving 3 parameters per target.
    Decoupled,
}

impl Coupling {
    pub fn params_per_target(self) -> usize {
        match self {
            Coupling::Full => 4,
            Coupling::Decoupled => 3,
        }
    }
}

/// Analytic `∂μ/∂γ`, one column per natural parameter, ordered
/// `(f_k, τ_k, φ_k[, θ_k])` for `k = 0..K`.
pub fn mean_derivatives(
    scenario: &Scenario,
    p: &[f64],
    bf: &Beamforming,
    coupling: Coupling,
) -> Result<CMatrix> {
    let cfg = &scenario.config;
    bf.check(cfg)?;
    if p.len() != cfg.subcarriers {
        return Err(Error::Dimension("power vector length mismatch".into()));
    }
    let (mr, n_sc, q_count) = (cfg.rx_elements, cfg.subcarriers, cfg.blocks);
    let ratio = cfg.spacing_ratio();
    let ts = cfg.block_duration();
    let df = cfg.subcarrier_spacing_hz;
    let per = coupling.params_per_target();
    let mut d = CMatrix::zeros(mr * n_sc * q_count, per * scenario.num_targets());

    for (k, t) in scenario.targets.iter().enumerate() {
        let amp = t.amplitude(cfg) / (mr as f64).sqrt();
        let (fd, tau, phi, theta) = (t.doppler(cfg), t.delay(), t.doa_sine(), t.dod_sine());
        let (gains, dgains) = match coupling {
            Coupling::Full => (tx_gains(theta, bf, ratio), tx_gain_derivs(theta, bf, ratio)),
            Coupling::Decoupled => {
                let mut g = vec![C64::new(0.0, 0.0); n_sc];
                for n in scenario.carrier_sets[k].clone() {
                    g[n] = C64::new(1.0, 0.0);
                }
                (g, vec![C64::new(0.0, 0.0); n_sc])
            }
        };
        let col = per * k;
        for n in 0..n_sc {
            let base_n = C64::from_polar(amp * p[n], -2.0 * PI * n as f64 * df * tau);
            if base_n.norm() == 0.0 || (gains[n].norm() == 0.0 && dgains[n].norm() == 0.0) {
                continue;
            }
            let d_tau = C64::new(0.0, -2.0 * PI * n as f64 * df);
            for q in 0..q_count {
                let base_q = base_n * C64::from_polar(1.0, 2.0 * PI * fd * q as f64 * ts);
                let d_f = C64::new(0.0, 2.0 * PI * q as f64 * ts);
                for m in 0..mr {
                    let row = m + mr * (q + q_count * n);
                    let d_phi = C64::new(0.0, -2.0 * PI * ratio * m as f64);
                    let base = base_q * C64::from_polar(1.0, -2.0 * PI * ratio * m as f64 * phi);
                    let val = base * gains[n];
                    d[(row, col)] = d_f * val;
                    d[(row, col + 1)] = d_tau * val;
                    d[(row, col + 2)] = d_phi * val;
                    if per == 4 {
                        d[(row, col + 3)] = base * dgains[n];
                    }
                }
            }
        }
    }
    Ok(d)
}

/// `2 Re[D^H E^{-1} D]` with `E = diag(p_n n_0 T)` over `M_R Q`-row subcarrier blocks.
/// Subcarriers with zero power carry no information and are skipped.
pub fn fim_from_derivatives(
    d: &CMatrix,
    p: &[f64],
    noise_psd: f64,
    symbol_duration: f64,
) -> DMatrix<f64> {
    let cols = d.ncols();
    let block = d.nrows() / p.len();
    let mut acc = DMatrix::<C64>::zeros(cols, cols);
    for (n, &pn) in p.iter().enumerate() {
        if pn <= 0.0 {
            continue;
        }
        let w = 1.0 / (pn * noise_psd * symbol_duration);
        let rows = d.rows(n * block, block);
        acc += rows.ad_mul(&rows) * C64::new(w, 0.0);
    }
    let mut j = acc.map(|z| 2.0 * z.re);
    j.fill_upper_triangle_with_lower_triangle();
    j
}

fn jacobian_diag(scenario: &Scenario, coupling: Coupling) -> Vec<f64> {
    let lambda = scenario.config.wavelength();
    let mut q = Vec::new();
    for t in &scenario.targets {
        q.extend_from_slice(&[1.0 / lambda, 1.0 / SPEED_OF_LIGHT, t.doa.cos()]);
        if coupling == Coupling::Full {
            q.push(t.dod.cos());
        }
    }
    q
}

fn param_label(index: usize, per: usize) -> String {
    format!("{}[{}]", PARAM_NAMES[index % per], index / per)
}

/// Inverse of a symmetric positive-definite matrix after Jacobi scaling,
/// together with the condition number of the scaled matrix.
pub fn spd_inverse(
    j: &DMatrix<f64>,
    label: impl Fn(usize) -> String,
) -> Result<(DMatrix<f64>, f64)> {
    let n = j.nrows();
    let mut scale = vec![0.0; n];
    for i in 0..n {
        let d = j[(i, i)];
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::SingularFisher {
                direction: label(i),
                condition: f64::INFINITY,
            });
        }
        scale[i] = 1.0 / d.sqrt();
    }
    let s = DMatrix::from_fn(n, n, |a, b| j[(a, b)] * scale[a] * scale[b]);
    let eig = SymmetricEigen::new(s);
    let (imin, lmin) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((0, 0.0));
    let lmax = eig.eigenvalues.iter().copied().fold(f64::MIN, f64::max);
    let condition = if lmin > 0.0 {
        lmax / lmin
    } else {
        f64::INFINITY
    };
    if !(condition <= MAX_CONDITION) {
        let v = eig.eigenvectors.column(imin);
        let worst = v.iamax();
        return Err(Error::SingularFisher {
            direction: label(worst),
            condition,
        });
    }
    let inv_vals = eig.eigenvalues.map(|l| 1.0 / l);
    let s_inv =
        &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    let inv = DMatrix::from_fn(n, n, |a, b| s_inv[(a, b)] * scale[a] * scale[b]);
    Ok((inv, condition))
}

/// Bounds for one target in physical units: (m/s)², m², rad², rad².
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetBounds {
    pub velocity: f64,
    pub range: f64,
    pub doa: f64,
    pub dod: f64,
}

impl TargetBounds {
    fn from_slice(v: &[f64]) -> Self {
        TargetBounds {
            velocity: v[0],
            range: v[1],
            doa: v[2],
            dod: v.get(3).copied().unwrap_or(f64::NAN),
        }
    }
}

/// Coupled Fisher information of all targets.
#[derive(Clone, Debug)]
pub struct FullFisher {
    /// `J(γ)`, natural parameters.
    pub natural: DMatrix<f64>,
    /// `J(u) = Q J(γ) Q^T`, physical parameters.
    pub physical: DMatrix<f64>,
    /// Inverse of `physical`.
    pub covariance: DMatrix<f64>,
    pub condition: f64,
    /// Diagonal of the joint inverse, per target.
    pub crlb: Vec<TargetBounds>,
    /// Diagonal of each self-block inverse `[J_kk]^{-1}`, per target.
    pub self_block_crlb: Vec<TargetBounds>,
}

impl FullFisher {
    /// Block `(k, k')` of `J(u)`.
    pub fn physical_block(&self, k: usize, kp: usize) -> DMatrix<f64> {
        self.physical.view((4 * k, 4 * kp), (4, 4)).into_owned()
    }

    /// Block `(k, k')` of `J(γ)`.
    pub fn natural_block(&self, k: usize, kp: usize) -> DMatrix<f64> {
        self.natural.view((4 * k, 4 * kp), (4, 4)).into_owned()
    }
}

/// Full coupled FIM and CRLB at the scenario's radar noise PSD.
pub fn fim_full(scenario: &Scenario, p: &[f64], bf: &Beamforming) -> Result<FullFisher> {
    fim_full_with_noise(scenario, p, bf, scenario.config.radar_noise_psd)
}

pub fn fim_full_with_noise(
    scenario: &Scenario,
    p: &[f64],
    bf: &Beamforming,
    noise_psd: f64,
) -> Result<FullFisher> {
    let cfg = &scenario.config;
    if !(noise_psd > 0.0) {
        return Err(Error::InvalidConfig(
            "radar noise PSD must be positive for Fisher information".into(),
        ));
    }
    let d = mean_derivatives(scenario, p, bf, Coupling::Full)?;
    let natural = fim_from_derivatives(&d, p, noise_psd, cfg.symbol_duration());
    let q = jacobian_diag(scenario, Coupling::Full);
    let physical = DMatrix::from_fn(natural.nrows(), natural.ncols(), |a, b| {
        q[a] * natural[(a, b)] * q[b]
    });
    let (covariance, condition) = spd_inverse(&physical, |i| param_label(i, 4))?;
    let k_count = scenario.num_targets();
    let mut crlb = Vec::with_capacity(k_count);
    let mut self_block_crlb = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let diag: Vec<f64> = (0..4).map(|i| covariance[(4 * k + i, 4 * k + i)]).collect();
        crlb.push(TargetBounds::from_slice(&diag));
        let block = physical.view((4 * k, 4 * k), (4, 4)).into_owned();
        let (inv, _) = spd_inverse(&block, |i| param_label(4 * k + i, 4))?;
        let diag: Vec<f64> = (0..4).map(|i| inv[(i, i)]).collect();
        self_block_crlb.push(TargetBounds::from_slice(&diag));
    }
    Ok(FullFisher {
        natural,
        physical,
        covariance,
        condition,
        crlb,
        self_block_crlb,
    })
}

/// Per-subcarrier information vectors of one target in physical units;
/// index 1 = velocity, 2 = range, 3 = DoA. Zero outside the target's carrier set.
#[derive(Clone, Debug, PartialEq)]
pub struct GVectors {
    pub g11: Vec<f64>,
    pub g12: Vec<f64>,
    pub g13: Vec<f64>,
    pub g22: Vec<f64>,
    pub g23: Vec<f64>,
    pub g33: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl GVectors {
    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        match (i.min(j), i.max(j)) {
            (1, 1) => &self.g11,
            (1, 2) => &self.g12,
            (1, 3) => &self.g13,
            (2, 2) => &self.g22,
            (2, 3) => &self.g23,
            (3, 3) => &self.g33,
            _ => panic!("g-vector index ({i},{j}) out of 1..=3"),
        }
    }

    /// Self block `J_kk = 2 [p^T g_ij]`.
    pub fn fisher_block(&self, p: &[f64]) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| 2.0 * dot(p, self.get(i + 1, j + 1)))
    }

    /// `p^T G p` with `G = 2 (g11 g22^T - g12 g21^T)`.
    pub fn quad_g(&self, p: &[f64]) -> f64 {
        let a = dot(p, &self.g11);
        let b = dot(p, &self.g22);
        let c = dot(p, &self.g12);
        2.0 * (a * b - c * c)
    }

    pub fn dot(&self, i: usize, j: usize, p: &[f64]) -> f64 {
        dot(p, self.get(i, j))
    }

    /// Loose bounds `(v, r, β)` from the velocity/range 2×2 block and the DoA term alone.
    pub fn lcrlb(&self, p: &[f64]) -> Result<Lcrlb> {
        let pg33 = self.dot(3, 3, p);
        let pgp = self.quad_g(p);
        if !(pg33 > 0.0) {
            return Err(Error::Unidentifiable("DoA (p^T g33 = 0)".into()));
        }
        if !(pgp > 0.0) {
            return Err(Error::Unidentifiable(
                "velocity/range (p^T G p <= 0)".into(),
            ));
        }
        Ok(Lcrlb {
            velocity: self.dot(2, 2, p) / pgp,
            range: self.dot(1, 1, p) / pgp,
            doa: 1.0 / (2.0 * pg33),
        })
    }
}

/// Closed-form information vectors of every target under the decoupled
/// model, at the scenario's radar noise PSD.
pub fn g_vectors_closed(scenario: &Scenario) -> Vec<GVectors> {
    g_vectors_closed_with_noise(scenario, scenario.config.radar_noise_psd)
}

pub fn g_vectors_closed_with_noise(scenario: &Scenario, noise_psd: f64) -> Vec<GVectors> {
    let cfg = &scenario.config;
    let n_sc = cfg.subcarriers;
    let q = cfg.blocks as f64;
    let mr = cfg.rx_elements as f64;
    let lambda = cfg.wavelength();
    let c = SPEED_OF_LIGHT;
    let ts = cfg.block_duration();
    let df = cfg.subcarrier_spacing_hz;
    let d = cfg.element_spacing_m;
    let n0t = noise_psd * cfg.symbol_duration();
    let two_pi = 2.0 * PI;

    scenario
        .targets
        .iter()
        .zip(&scenario.carrier_sets)
        .map(|(t, set)| {
            let a2 = t.amplitude(cfg).powi(2);
            let cb = t.doa.cos();
            // Σ(q)^2 over blocks, Σ q, Σ m and Σ m^2 over the array (zero-based)
            let sq2 = q * (q - 1.0) * (2.0 * q - 1.0) / 6.0;
            let sq1 = q * (q - 1.0) / 2.0;
            let g11 = a2 * (two_pi * ts).powi(2) * sq2 / (lambda * lambda * n0t);
            let g13 = -a2 * two_pi * two_pi * ts * d * sq1 * (mr - 1.0) * cb
                / (2.0 * lambda * lambda * n0t);
            let g33 = q * a2 * (two_pi * d).powi(2) * (mr - 1.0) * (2.0 * mr - 1.0) * cb * cb
                / (6.0 * lambda * lambda * n0t);
            let mut g = GVectors {
                g11: vec![0.0; n_sc],
                g12: vec![0.0; n_sc],
                g13: vec![0.0; n_sc],
                g22: vec![0.0; n_sc],
                g23: vec![0.0; n_sc],
                g33: vec![0.0; n_sc],
            };
            for n in set.clone() {
                let nf = n as f64;
                g.g11[n] = g11;
                g.g12[n] = -a2 * two_pi * two_pi * ts * df * sq1 * nf / (c * lambda * n0t);
                g.g13[n] = g13;
                g.g22[n] = q * a2 * (two_pi * nf * df).powi(2) / (c * c * n0t);
                g.g23[n] = a2 * two_pi * two_pi * df * d * q * (mr - 1.0) * nf * cb
                    / (2.0 * c * lambda * n0t);
                g.g33[n] = g33;
            }
            g
        })
        .collect()
}

/// Loose bounds for one target: (m/s)², m², rad².
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lcrlb {
    pub velocity: f64,
    pub range: f64,
    pub doa: f64,
}

pub fn lcrlb(scenario: &Scenario, p: &[f64]) -> Result<Vec<Lcrlb>> {
    check_len(scenario, p)?;
    g_vectors_closed(scenario)
        .iter()
        .map(|g| g.lcrlb(p))
        .collect()
}

/// Per-target `[J_kk]^{-1}` of the decoupled model (3×3, physical units).
pub fn crlb_decoupled(scenario: &Scenario, p: &[f64]) -> Result<Vec<Matrix3<f64>>> {
    check_len(scenario, p)?;
    g_vectors_closed(scenario)
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let j = g.fisher_block(p);
            let dj = DMatrix::from_fn(3, 3, |a, b| j[(a, b)]);
            let (inv, _) = spd_inverse(&dj, |i| param_label(3 * k + i, 3))?;
            Ok(Matrix3::from_fn(|a, b| inv[(a, b)]))
        })
        .collect()
}

/// Inverse of the velocity/range block alone, `C^{vr}_k`.
pub fn velocity_range_block_inverse(g: &GVectors, p: &[f64]) -> Option<Matrix2<f64>> {
    let j = Matrix2::new(
        2.0 * g.dot(1, 1, p),
        2.0 * g.dot(1, 2, p),
        2.0 * g.dot(1, 2, p),
        2.0 * g.dot(2, 2, p),
    );
    j.try_inverse()
}

fn check_len(scenario: &Scenario, p: &[f64]) -> Result<()> {
    if p.len() != scenario.config.subcarriers {
        return Err(Error::Dimension(format!(
            "power vector has length {}, expected {}",
            p.len(),
            scenario.config.subcarriers
        )));
    }
    if p.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::InvalidConfig("powers must be non-negative".into()));
    }
    Ok(())
}

/// Unit-gain check used by the decoupled model: `a_t(α)^T conj(a_t(α)) = 1`.
pub fn matched_gain(dod: f64, tx_elements: usize, spacing_ratio: f64) -> C64 {
    let a = steering_tx(dod, tx_elements, spacing_ratio);
    a.transpose().dot(&a.conjugate().transpose())
}
