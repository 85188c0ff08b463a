//! Rate-maximizing subcarrier power allocation under per-target bound limits.
//!
//! maximize   Σ_n log2(1 + s_n p_n)
//! subject to Σ_n p_n ≤ p_T,  p_n ≥ 0,
//!            LCRLB_v,k ≤ η_v,  LCRLB_r,k ≤ η_r,  LCRLB_β,k ≤ η_β   for every k.
//!
//! The DoA limit is linear in `p`. The velocity and range limits become 2×2
//! linear matrix inequalities `J_vr,k(p) ⪰ diag(1/η_v, 0)` (resp.
//! `diag(0, 1/η_r)`) by a Schur complement. The problem is solved with a
//! log-barrier interior-point method; a phase-I problem finds a strictly
//! feasible start or proves infeasibility.

use std::f64::consts::LN_2;

use nalgebra::{Cholesky, DMatrix, DVector, Matrix2, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{crlb_decoupled, g_vectors_closed, GVectors, Lcrlb};
use crate::model::{comm_gains, transmission_rate, RateReport, Scenario};
use crate::parallel::{map_indexed, Execution};

/// Estimated parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameter {
    Velocity,
    Range,
    Doa,
}

impl Parameter {
    pub const ALL: [Parameter; 3] = [Parameter::Velocity, Parameter::Range, Parameter::Doa];

    pub fn name(self) -> &'static str {
        match self {
            Parameter::Velocity => "velocity",
            Parameter::Range => "range",
            Parameter::Doa => "doa",
        }
    }
}

/// Upper limits on the loose bounds, in (m/s)², m² and rad².
/// `f64::INFINITY` leaves a parameter unconstrained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrlbTargets {
    pub velocity: f64,
    pub range: f64,
    pub doa: f64,
}

impl Default for CrlbTargets {
    fn default() -> Self {
        CrlbTargets::unconstrained()
    }
}

impl CrlbTargets {
    pub fn unconstrained() -> Self {
        CrlbTargets {
            velocity: f64::INFINITY,
            range: f64::INFINITY,
            doa: f64::INFINITY,
        }
    }

    pub fn get(&self, p: Parameter) -> f64 {
        match p {
            Parameter::Velocity => self.velocity,
            Parameter::Range => self.range,
            Parameter::Doa => self.doa,
        }
    }

    pub fn with(mut self, p: Parameter, eta: f64) -> Self {
        match p {
            Parameter::Velocity => self.velocity = eta,
            Parameter::Range => self.range = eta,
            Parameter::Doa => self.doa = eta,
        }
        self
    }

    fn validate(&self) -> Result<()> {
        for p in Parameter::ALL {
            let v = self.get(p);
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{} limit must be positive, got {v}",
                    p.name()
                )));
            }
        }
        Ok(())
    }
}

/// Lagrange multipliers recovered from the central path. Matrix duals refer
/// to the internally scaled inequalities.
#[derive(Clone, Debug, PartialEq)]
pub struct Duals {
    pub budget: f64,
    pub doa: Vec<Option<f64>>,
    pub velocity: Vec<Option<Matrix2<f64>>>,
    pub range: Vec<Option<Matrix2<f64>>>,
}

#[derive(Clone, Debug)]
pub struct PowerAllocation {
    pub power: Vec<f64>,
    pub rate: RateReport,
    pub lcrlb: Vec<Lcrlb>,
    pub duals: Duals,
    /// Largest deviation (W) from the water-filling form implied by the duals.
    pub waterfilling_residual: f64,
    /// Barrier duality-gap bound `m/t` on the rate, in bits.
    pub duality_gap: f64,
    pub newton_steps: usize,
}

/// Closed-form water-filling `p_n = [1/(λ ln 2) - 1/s_n]^+` with `Σ p_n = total`.
pub fn waterfill(gains: &[f64], total: f64) -> Vec<f64> {
    let mut inv: Vec<(usize, f64)> = gains
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0.0)
        .map(|(i, &s)| (i, 1.0 / s))
        .collect();
    inv.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut p = vec![0.0; gains.len()];
    if inv.is_empty() || total <= 0.0 {
        return p;
    }
    let mut level = 0.0;
    let mut sum = 0.0;
    for (count, &(_, x)) in inv.iter().enumerate() {
        sum += x;
        let candidate = (total + sum) / (count + 1) as f64;
        if count + 1 == inv.len() || candidate <= inv[count + 1].1 {
            level = candidate;
            break;
        }
    }
    for &(i, x) in &inv {
        p[i] = (level - x).max(0.0);
    }
    p
}

#[derive(Clone, Debug)]
struct LinCon {
    coeffs: Vec<(usize, f64)>,
    constant: f64,
}

impl LinCon {
    fn value(&self, x: &[f64]) -> f64 {
        self.constant + self.coeffs.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }
}

#[derive(Clone, Debug)]
struct LmiCon {
    c0: Matrix2<f64>,
    terms: Vec<(usize, Matrix2<f64>)>,
}

impl LmiCon {
    fn value(&self, x: &[f64]) -> Matrix2<f64> {
        let mut c = self.c0;
        for (i, l) in &self.terms {
            c += l * x[*i];
        }
        c
    }
}

fn is_pd(c: &Matrix2<f64>) -> bool {
    c[(0, 0)] > 0.0 && c[(1, 1)] > 0.0 && c.determinant() > 0.0
}

#[derive(Clone, Debug)]
enum Objective {
    /// `-Σ log2(1 + s_n x_n)` over the first `s.len()` variables.
    NegRate(Vec<f64>),
    /// The last variable.
    Slack,
}

#[derive(Clone, Debug)]
struct Problem {
    dim: usize,
    /// The first `positive` variables are kept strictly positive.
    positive: usize,
    /// Newton steps keep the sum of the positive variables fixed.
    fixed_sum: bool,
    lin: Vec<LinCon>,
    lmi: Vec<LmiCon>,
    obj: Objective,
}

impl Problem {
    fn constraint_count(&self) -> usize {
        self.positive + self.lin.len() + 2 * self.lmi.len()
    }

    fn f0(&self, x: &[f64]) -> f64 {
        match &self.obj {
            Objective::NegRate(s) => {
                -s.iter().zip(x).map(|(s, p)| (s * p).ln_1p()).sum::<f64>() / LN_2
            }
            Objective::Slack => x[self.dim - 1],
        }
    }

    fn barrier(&self, x: &[f64]) -> Option<f64> {
        let mut phi = 0.0;
        for &v in &x[..self.positive] {
            if !(v > 0.0) {
                return None;
            }
            phi -= v.ln();
        }
        for c in &self.lin {
            let v = c.value(x);
            if !(v > 0.0) {
                return None;
            }
            phi -= v.ln();
        }
        for c in &self.lmi {
            let m = c.value(x);
            if !is_pd(&m) {
                return None;
            }
            phi -= m.determinant().ln();
        }
        Some(phi)
    }

    fn objective(&self, x: &[f64], t: f64) -> Option<f64> {
        self.barrier(x).map(|phi| t * self.f0(x) + phi)
    }

    fn grad_hess(&self, x: &[f64], t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim;
        let mut g = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        match &self.obj {
            Objective::NegRate(s) => {
                for (i, &si) in s.iter().enumerate() {
                    let den = 1.0 + si * x[i];
                    g[i] -= t * si / (den * LN_2);
                    h[(i, i)] += t * si * si / (den * den * LN_2);
                }
            }
            Objective::Slack => g[d - 1] += t,
        }
        for i in 0..self.positive {
            g[i] -= 1.0 / x[i];
            h[(i, i)] += 1.0 / (x[i] * x[i]);
        }
        for c in &self.lin {
            let v = c.value(x);
            for &(i, ci) in &c.coeffs {
                g[i] -= ci / v;
                for &(j, cj) in &c.coeffs {
                    h[(i, j)] += ci * cj / (v * v);
                }
            }
        }
        for c in &self.lmi {
            let inv = c.value(x).try_inverse().unwrap_or_else(Matrix2::zeros);
            let prods: Vec<(usize, Matrix2<f64>)> =
                c.terms.iter().map(|(i, l)| (*i, inv * l)).collect();
            for (a, (i, mi)) in prods.iter().enumerate() {
                g[*i] -= mi.trace();
                for (j, mj) in &prods[a..] {
                    let v = (mi * mj).trace();
                    h[(*i, *j)] += v;
                    if i != j {
                        h[(*j, *i)] += v;
                    }
                }
            }
        }
        (g, h)
    }
}

const NEWTON_TOL: f64 = 1e-10;
const MAX_CENTERING_STEPS: usize = 200;
const BARRIER_GROWTH: f64 = 10.0;

/// Newton step, optionally keeping `Σ_{i<fixed_sum} x_i` constant. Returns
/// the step and the multiplier of that equality.
fn newton_direction(
    g: &DVector<f64>,
    h: DMatrix<f64>,
    fixed_sum: Option<usize>,
) -> Result<(DVector<f64>, f64)> {
    let scale = h.diagonal().iter().cloned().fold(0.0, f64::max).max(1e-300);
    let mut reg = 0.0;
    for _ in 0..8 {
        let mut hr = h.clone();
        for i in 0..hr.nrows() {
            hr[(i, i)] += reg;
        }
        if let Some(ch) = Cholesky::new(hr) {
            let dx = ch.solve(&(-g));
            return Ok(match fixed_sum {
                None => (dx, 0.0),
                Some(count) => {
                    let ones = DVector::from_fn(g.len(), |i, _| if i < count { 1.0 } else { 0.0 });
                    let h_ones = ch.solve(&ones);
                    // w = -(1^T H^{-1} g) / (1^T H^{-1} 1)
                    let w = ones.dot(&dx) / ones.dot(&h_ones);
                    (dx - h_ones * w, w)
                }
            });
        }
        reg = if reg == 0.0 {
            scale * 1e-14
        } else {
            reg * 100.0
        };
    }
    Err(Error::Solver(
        "Newton system is not positive definite".into(),
    ))
}

/// Centers `x` for barrier weight `t`. Returns the number of Newton steps.
/// `stop` is checked after every accepted step.
struct Centered {
    steps: usize,
    stopped: bool,
    /// Multiplier of the fixed-sum equality at the last Newton solve.
    equality: f64,
}

fn center(
    problem: &Problem,
    x: &mut [f64],
    t: f64,
    stop: &dyn Fn(&[f64]) -> bool,
) -> Result<Centered> {
    let mut fx = problem
        .objective(x, t)
        .ok_or_else(|| Error::Solver("centering started outside the feasible set".into()))?;
    let fixed_sum = problem.fixed_sum.then_some(problem.positive);
    let mut equality = 0.0;
    let done = |steps, stopped, equality| {
        Ok(Centered {
            steps,
            stopped,
            equality,
        })
    };
    for step in 0..MAX_CENTERING_STEPS {
        let (g, h) = problem.grad_hess(x, t);
        let (dx, w) = newton_direction(&g, h, fixed_sum)?;
        equality = w;
        let decrement = -g.dot(&dx);
        if decrement / 2.0 <= NEWTON_TOL {
            return done(step, false, equality);
        }
        let mut alpha = 1.0;
        let mut trial = x.to_vec();
        loop {
            for i in 0..x.len() {
                trial[i] = x[i] + alpha * dx[i];
            }
            if let Some(ft) = problem.objective(&trial, t) {
                if ft <= fx - 0.25 * alpha * decrement {
                    fx = ft;
                    break;
                }
            }
            alpha *= 0.5;
            if alpha < 1e-20 {
                // no further progress is possible at this precision
                return done(step, false, equality);
            }
        }
        x.copy_from_slice(&trial);
        if stop(x) {
            return done(step + 1, true, equality);
        }
    }
    done(MAX_CENTERING_STEPS, false, equality)
}

struct BarrierOutcome {
    t: f64,
    steps: usize,
    stopped: bool,
    equality: f64,
}

fn barrier_solve(
    problem: &Problem,
    x: &mut [f64],
    gap_tol: impl Fn(&[f64]) -> f64,
    stop: &dyn Fn(&[f64]) -> bool,
) -> Result<BarrierOutcome> {
    let m = problem.constraint_count() as f64;
    let (g_phi, _) = problem.grad_hess(x, 0.0);
    let (g_all, _) = problem.grad_hess(x, 1.0);
    let g_obj = &g_all - &g_phi;
    let mut t = (g_phi.norm() / g_obj.norm().max(1e-300)).clamp(1e-8, 1e8);
    let mut steps = 0;
    for _ in 0..200 {
        let c = center(problem, x, t, stop)?;
        steps += c.steps;
        if c.stopped || m / t < gap_tol(x) {
            return Ok(BarrierOutcome {
                t,
                steps,
                stopped: c.stopped,
                equality: c.equality,
            });
        }
        t *= BARRIER_GROWTH;
    }
    Err(Error::Solver("barrier method did not converge".into()))
}

/// The bound constraints of a scenario in scaled form.
struct BoundConstraints {
    /// `(target, 2 η_β p·g33 - 1)`.
    doa: Vec<(usize, LinCon)>,
    velocity: Vec<(usize, LmiCon)>,
    range: Vec<(usize, LmiCon)>,
}

impl BoundConstraints {
    fn build(scenario: &Scenario, g: &[GVectors], eta: &CrlbTargets) -> Result<Self> {
        let n_sc = scenario.config.subcarriers;
        let p_ref = scenario.uniform_power();
        let mut out = BoundConstraints {
            doa: Vec::new(),
            velocity: Vec::new(),
            range: Vec::new(),
        };
        for (k, gk) in g.iter().enumerate() {
            let set = scenario.carrier_sets[k].clone();
            if eta.doa.is_finite() {
                if gk.g33.iter().all(|&x| x == 0.0) {
                    return Err(Error::Unidentifiable(format!(
                        "DoA of target {k} carries no information"
                    )));
                }
                let coeffs = set
                    .clone()
                    .map(|n| (n, 2.0 * eta.doa * gk.g33[n]))
                    .collect();
                out.doa.push((
                    k,
                    LinCon {
                        coeffs,
                        constant: -1.0,
                    },
                ));
            }
            if eta.velocity.is_finite() || eta.range.is_finite() {
                let j00 = 2.0 * gk.dot(1, 1, &p_ref);
                let j11 = 2.0 * gk.dot(2, 2, &p_ref);
                if !(j00 > 0.0 && j11 > 0.0) {
                    return Err(Error::Unidentifiable(format!(
                        "velocity/range of target {k} carry no information"
                    )));
                }
                let l = |n: usize| 2.0 * Matrix2::new(gk.g11[n], gk.g12[n], gk.g12[n], gk.g22[n]);
                let build = |d: Matrix2<f64>, c0: Matrix2<f64>| LmiCon {
                    c0,
                    terms: set.clone().map(|n| (n, d * l(n) * d)).collect(),
                };
                if eta.velocity.is_finite() {
                    let d = Matrix2::new(eta.velocity.sqrt(), 0.0, 0.0, 1.0 / j11.sqrt());
                    out.velocity
                        .push((k, build(d, Matrix2::new(-1.0, 0.0, 0.0, 0.0))));
                }
                if eta.range.is_finite() {
                    let d = Matrix2::new(1.0 / j00.sqrt(), 0.0, 0.0, eta.range.sqrt());
                    out.range
                        .push((k, build(d, Matrix2::new(0.0, 0.0, 0.0, -1.0))));
                }
            }
        }
        debug_assert!(out
            .doa
            .iter()
            .all(|(_, c)| c.coeffs.iter().all(|&(n, _)| n < n_sc)));
        Ok(out)
    }

    fn satisfied(&self, p: &[f64]) -> bool {
        self.doa.iter().all(|(_, c)| c.value(p) > 0.0)
            && self
                .velocity
                .iter()
                .chain(&self.range)
                .all(|(_, c)| is_pd(&c.value(p)))
    }
}

fn budget_con(n: usize, total: f64) -> LinCon {
    LinCon {
        coeffs: (0..n).map(|i| (i, -1.0)).collect(),
        constant: total,
    }
}

/// Uniform start just inside the power budget.
fn interior_start(scenario: &Scenario) -> Vec<f64> {
    scenario
        .uniform_power()
        .iter()
        .map(|p| p * (1.0 - 1e-3))
        .collect()
}

/// Phase I: a strictly feasible allocation, `Ok(None)` if none exists.
fn phase_one(scenario: &Scenario, cons: &BoundConstraints) -> Result<Option<(Vec<f64>, usize)>> {
    let n = scenario.config.subcarriers;
    let p0 = interior_start(scenario);
    if cons.satisfied(&p0) {
        return Ok(Some((p0, 0)));
    }
    let s_idx = n;
    let mut lin = vec![budget_con(n, scenario.config.total_power_w)];
    let mut worst: f64 = 0.0;
    for (_, c) in &cons.doa {
        let mut c = c.clone();
        worst = worst.max(-c.value(&p0));
        c.coeffs.push((s_idx, 1.0));
        lin.push(c);
    }
    let mut lmi = Vec::new();
    for (_, c) in cons.velocity.iter().chain(&cons.range) {
        let v = c.value(&p0);
        let eig = v.symmetric_eigenvalues();
        worst = worst.max(-eig.min());
        let mut c = c.clone();
        c.terms.push((s_idx, Matrix2::identity()));
        lmi.push(c);
    }
    let problem = Problem {
        dim: n + 1,
        positive: n,
        lin,
        lmi,
        obj: Objective::Slack,
        fixed_sum: false,
    };
    let mut x = p0;
    x.push(worst + 1.0);
    let outcome = barrier_solve(&problem, &mut x, |_| 1e-9, &|x: &[f64]| x[s_idx] <= -1e-2)?;
    let s = x[s_idx];
    x.truncate(n);
    if outcome.stopped || (s < 0.0 && cons.satisfied(&x)) {
        Ok(Some((x, outcome.steps)))
    } else {
        Ok(None)
    }
}

/// Whether some allocation meets every limit in `eta`.
pub fn is_feasible(scenario: &Scenario, eta: &CrlbTargets) -> Result<bool> {
    scenario.validate()?;
    eta.validate()?;
    let g = g_vectors_closed(scenario);
    let cons = BoundConstraints::build(scenario, &g, eta)?;
    Ok(phase_one(scenario, &cons)?.is_some())
}

/// Solve the allocation problem for one set of limits.
pub fn optimize_power(scenario: &Scenario, eta: &CrlbTargets) -> Result<PowerAllocation> {
    scenario.validate()?;
    eta.validate()?;
    let cfg = &scenario.config;
    if !(cfg.total_power_w > 0.0) {
        return Err(Error::InvalidConfig("total power must be positive".into()));
    }
    if !(cfg.comm_noise_psd > 0.0) {
        return Err(Error::InvalidConfig(
            "communication noise PSD must be positive".into(),
        ));
    }
    let n = cfg.subcarriers;
    let g = g_vectors_closed(scenario);
    let cons = BoundConstraints::build(scenario, &g, eta)?;
    let (mut p, phase_one_steps) = phase_one(scenario, &cons)?.ok_or_else(|| {
        Error::Infeasible(format!(
            "no allocation meets eta_v={:e}, eta_r={:e}, eta_beta={:e}",
            eta.velocity, eta.range, eta.doa
        ))
    })?;

    // the rate increases in every p_n, so the budget is tight at the optimum;
    // scaling up only loosens the bound constraints
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x *= cfg.total_power_w / sum);
    let s = comm_gains(scenario);
    let lin: Vec<LinCon> = cons.doa.iter().map(|(_, c)| c.clone()).collect();
    let lmi: Vec<LmiCon> = cons
        .velocity
        .iter()
        .chain(&cons.range)
        .map(|(_, c)| c.clone())
        .collect();
    let problem = Problem {
        dim: n,
        positive: n,
        lin,
        lmi,
        obj: Objective::NegRate(s.clone()),
        fixed_sum: true,
    };
    let outcome = barrier_solve(
        &problem,
        &mut p,
        |x| 1e-10 * problem.f0(x).abs().max(1.0),
        &|_| false,
    )?;
    let t = outcome.t;

    let budget = outcome.equality / t;
    let mut duals = Duals {
        budget,
        doa: vec![None; g.len()],
        velocity: vec![None; g.len()],
        range: vec![None; g.len()],
    };
    for (k, c) in &cons.doa {
        duals.doa[*k] = Some(1.0 / (t * c.value(&p)));
    }
    for (slot, list) in [
        (&mut duals.velocity, &cons.velocity),
        (&mut duals.range, &cons.range),
    ] {
        for (k, c) in list {
            slot[*k] = Some(c.value(&p).try_inverse().unwrap_or_else(Matrix2::zeros) / t);
        }
    }
    let waterfilling_residual = residual(&p, &s, &duals, &cons);
    let rate = transmission_rate(scenario, &p)?;
    let lcrlb = g
        .iter()
        .map(|gk| gk.lcrlb(&p))
        .collect::<Result<Vec<_>>>()?;
    Ok(PowerAllocation {
        power: p,
        rate,
        lcrlb,
        duals,
        waterfilling_residual,
        duality_gap: problem.constraint_count() as f64 / t,
        newton_steps: phase_one_steps + outcome.steps,
    })
}

fn residual(p: &[f64], s: &[f64], duals: &Duals, cons: &BoundConstraints) -> f64 {
    // ξ_n: constraint-dual contributions on subcarrier n
    let mut xi = vec![0.0; p.len()];
    for (k, c) in &cons.doa {
        let mu = duals.doa[*k].unwrap_or(0.0);
        for &(i, a) in &c.coeffs {
            xi[i] += mu * a;
        }
    }
    for (slot, list) in [
        (&duals.velocity, &cons.velocity),
        (&duals.range, &cons.range),
    ] {
        for (k, c) in list {
            let z = slot[*k].unwrap_or_else(Matrix2::zeros);
            for (i, l) in &c.terms {
                xi[*i] += (z * l).trace();
            }
        }
    }
    (0..p.len())
        .filter(|&i| s[i] > 0.0)
        .map(|i| {
            let level = duals.budget - xi[i];
            let wf = if level > 0.0 {
                (1.0 / (level * LN_2) - 1.0 / s[i]).max(0.0)
            } else {
                f64::INFINITY
            };
            (p[i] - wf).abs()
        })
        .fold(0.0, f64::max)
}

/// `max_n |p_n - [1/((λ_1 - ξ_n) ln 2) - 1/s_n]^+|` in watts, with `ξ_n`
/// assembled from the allocation's duals for the limits `eta`.
pub fn waterfilling_residual(
    alloc: &PowerAllocation,
    scenario: &Scenario,
    eta: &CrlbTargets,
) -> Result<f64> {
    eta.validate()?;
    if alloc.power.len() != scenario.config.subcarriers {
        return Err(Error::Dimension(
            "allocation length differs from the subcarrier count".into(),
        ));
    }
    let g = g_vectors_closed(scenario);
    let cons = BoundConstraints::build(scenario, &g, eta)?;
    let missing = cons
        .doa
        .iter()
        .any(|(k, _)| alloc.duals.doa.get(*k).is_none_or(|d| d.is_none()))
        || cons
            .velocity
            .iter()
            .any(|(k, _)| alloc.duals.velocity.get(*k).is_none_or(|d| d.is_none()))
        || cons
            .range
            .iter()
            .any(|(k, _)| alloc.duals.range.get(*k).is_none_or(|d| d.is_none()));
    if missing {
        return Err(Error::InvalidConfig(
            "allocation carries no duals for some active limit".into(),
        ));
    }
    Ok(residual(
        &alloc.power,
        &comm_gains(scenario),
        &alloc.duals,
        &cons,
    ))
}

/// The scaled 2×2 matrices whose positive semidefiniteness is equivalent to
/// `LCRLB_v ≤ η_v` and `LCRLB_r ≤ η_r` (velocity first).
pub fn lmi_matrices(g: &GVectors, eta: &CrlbTargets, p: &[f64]) -> (Matrix2<f64>, Matrix2<f64>) {
    let (g11, g12, g22) = (g.dot(1, 1, p), g.dot(1, 2, p), g.dot(2, 2, p));
    let (ev, er) = (eta.velocity, eta.range);
    let cv = Matrix2::new(
        2.0 * g22,
        2.0 * g12 * ev.sqrt(),
        2.0 * g12 * ev.sqrt(),
        2.0 * g11 * ev - 1.0,
    );
    let cr = Matrix2::new(
        2.0 * g11,
        2.0 * g12 * er.sqrt(),
        2.0 * g12 * er.sqrt(),
        2.0 * g22 * er - 1.0,
    );
    (cv, cr)
}

/// One point of a rate/bound trade-off curve.
#[derive(Clone, Debug)]
pub struct TradeoffPoint {
    pub allocation: PowerAllocation,
    /// Per-target inverse of the decoupled 3×3 Fisher block `(v, r, β)`.
    pub crlb: Vec<Matrix3<f64>>,
}

#[derive(Debug)]
pub struct TradeoffRow {
    pub eta: f64,
    pub result: Result<TradeoffPoint>,
}

/// Optimize along `grid` for `which`, the other limits held at `fixed`.
/// Rows below the minimum achievable bound carry [`Error::Infeasible`].
pub fn tradeoff_sweep(
    scenario: &Scenario,
    which: Parameter,
    grid: &[f64],
    fixed: &CrlbTargets,
    exec: Execution,
) -> Vec<TradeoffRow> {
    map_indexed(exec, grid.len(), |i| {
        let eta = fixed.with(which, grid[i]);
        let result = optimize_power(scenario, &eta).and_then(|allocation| {
            let crlb = crlb_decoupled(scenario, &allocation.power)?;
            Ok(TradeoffPoint { allocation, crlb })
        });
        TradeoffRow {
            eta: grid[i],
            result,
        }
    })
}

/// Largest-over-targets loose bound of `param` under allocation `p`.
pub fn worst_lcrlb(scenario: &Scenario, p: &[f64], param: Parameter) -> Result<f64> {
    let l = crate::fisher::lcrlb(scenario, p)?;
    Ok(l.iter()
        .map(|b| match param {
            Parameter::Velocity => b.velocity,
            Parameter::Range => b.range,
            Parameter::Doa => b.doa,
        })
        .fold(0.0, f64::max))
}

/// Smallest limit on `param` (worst target) reachable by any allocation
/// that also meets `others` for the remaining parameters. Found by
/// bisection on the phase-I feasibility test, to relative precision `rel_tol`.
pub fn min_achievable(
    scenario: &Scenario,
    param: Parameter,
    others: &CrlbTargets,
    rel_tol: f64,
) -> Result<f64> {
    scenario.validate()?;
    let base = others.with(param, f64::INFINITY);
    let feasible = |eta: f64| is_feasible(scenario, &base.with(param, eta));
    let mut hi = worst_lcrlb(scenario, &scenario.uniform_power(), param)?;
    let mut grown = 0;
    while !feasible(hi)? {
        hi *= 4.0;
        grown += 1;
        if grown > 40 {
            return Err(Error::Infeasible(format!(
                "no allocation satisfies the other limits while bounding {}",
                param.name()
            )));
        }
    }
    let mut lo = hi / 4.0;
    while feasible(lo)? {
        hi = lo;
        lo /= 4.0;
        if lo < 1e-300 {
            return Err(Error::Solver(
                "minimum achievable bound is not bounded away from zero".into(),
            ));
        }
    }
    while hi / lo - 1.0 > rel_tol {
        let mid = (hi * lo).sqrt();
        if feasible(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{SystemConfig, Target};

    fn scenario(n: usize) -> Scenario {
        let mut cfg = SystemConfig::new(8, 8);
        cfg.subcarriers = n;
        Scenario::with_even_split(
            cfg,
            vec![
                Target::with_total_range(
                    30f64.to_radians(),
                    10.23f64.to_radians(),
                    1000.42,
                    19.21,
                    0.1,
                ),
                Target::with_total_range(
                    5f64.to_radians(),
                    30.34f64.to_radians(),
                    1050.75,
                    20.36,
                    0.1,
                ),
            ],
        )
        .unwrap()
    }

    fn waterfill_by_bisection(s: &[f64], total: f64) -> Vec<f64> {
        let alloc = |level: f64| {
            s.iter()
                .map(|&x| (level - 1.0 / x).max(0.0))
                .collect::<Vec<_>>()
        };
        let (mut lo, mut hi) = (0.0, total + s.iter().map(|x| 1.0 / x).fold(0.0, f64::max));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if alloc(mid).iter().sum::<f64>() > total {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        alloc(0.5 * (lo + hi))
    }

    #[test]
    fn closed_form_waterfill_matches_bisection() {
        let s = [5.0, 0.2, 1.0, 30.0, 0.05];
        for total in [0.1, 1.0, 25.0] {
            let a = waterfill(&s, total);
            let b = waterfill_by_bisection(&s, total);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn unconstrained_optimum_is_waterfilling() {
        let sc = scenario(16);
        let out = optimize_power(&sc, &CrlbTargets::unconstrained()).unwrap();
        let wf = waterfill(&comm_gains(&sc), sc.config.total_power_w);
        for (a, b) in out.power.iter().zip(&wf) {
            assert!((a - b).abs() < 1e-6 * sc.config.total_power_w, "{a} {b}");
        }
        assert!(
            out.waterfilling_residual <= 1e-6 * sc.config.total_power_w,
            "{} {}",
            out.waterfilling_residual,
            out.duality_gap
        );
    }

    #[test]
    fn constrained_solution_meets_limits() {
        let sc = scenario(16);
        let p0 = sc.uniform_power();
        let eta = CrlbTargets {
            velocity: worst_lcrlb(&sc, &p0, Parameter::Velocity).unwrap() * 0.9,
            range: f64::INFINITY,
            doa: worst_lcrlb(&sc, &p0, Parameter::Doa).unwrap() * 1.05,
        };
        let out = optimize_power(&sc, &eta).unwrap();
        for l in &out.lcrlb {
            assert!(l.velocity <= eta.velocity * (1.0 + 1e-9));
            assert!(l.doa <= eta.doa * (1.0 + 1e-9));
        }
        assert!(out.power.iter().sum::<f64>() <= sc.config.total_power_w * (1.0 + 1e-12));
        assert!(
            out.waterfilling_residual < 1e-5 * sc.config.total_power_w,
            "{}",
            out.waterfilling_residual
        );
        let again = waterfilling_residual(&out, &sc, &eta).unwrap();
        assert_eq!(again, out.waterfilling_residual);
        let mut bumped = out.clone();
        bumped.power[3] += 0.1 * sc.config.total_power_w;
        assert!(
            waterfilling_residual(&bumped, &sc, &eta).unwrap() >= 0.09 * sc.config.total_power_w
        );
    }

    #[test]
    fn impossible_limits_are_infeasible() {
        let sc = scenario(16);
        let eta = CrlbTargets::unconstrained().with(Parameter::Doa, 1e-20);
        assert!(matches!(
            optimize_power(&sc, &eta),
            Err(Error::Infeasible(_))
        ));
        assert!(!is_feasible(&sc, &eta).unwrap());
    }

    #[test]
    fn min_achievable_doa_matches_equalized_group_power() {
        let sc = scenario(16);
        let g = g_vectors_closed(&sc);
        // minimax: P_k ∝ 1/g33_k, and the common bound is Σ_k 1/(2 g33_k) / p_T
        let total: f64 = g
            .iter()
            .zip(&sc.carrier_sets)
            .map(|(gk, set)| 1.0 / (2.0 * gk.g33[set.start]))
            .sum();
        let expect = total / sc.config.total_power_w;
        let got = min_achievable(&sc, Parameter::Doa, &CrlbTargets::unconstrained(), 1e-7).unwrap();
        assert!((got / expect - 1.0).abs() < 1e-5, "{got} {expect}");
    }

    #[test]
    fn zero_power_lmi_is_not_psd() {
        let sc = scenario(16);
        let g = g_vectors_closed(&sc);
        let (cv, cr) = lmi_matrices(
            &g[0],
            &CrlbTargets {
                velocity: 0.1,
                range: 0.1,
                doa: 1.0,
            },
            &vec![0.0; 16],
        );
        assert_eq!(cv, Matrix2::new(0.0, 0.0, 0.0, -1.0));
        assert_eq!(cr, Matrix2::new(0.0, 0.0, 0.0, -1.0));
    }

    #[test]
    fn sweep_rate_is_non_decreasing() {
        let sc = scenario(16);
        let base = worst_lcrlb(&sc, &sc.uniform_power(), Parameter::Velocity).unwrap();
        let grid: Vec<f64> = (0..6).map(|i| base * 0.7 * 1.5f64.powi(i)).collect();
        let rows = tradeoff_sweep(
            &sc,
            Parameter::Velocity,
            &grid,
            &CrlbTargets::unconstrained(),
            Execution::Parallel,
        );
        let rates: Vec<f64> = rows
            .iter()
            .map(|r| r.result.as_ref().unwrap().allocation.rate.total)
            .collect();
        for w in rates.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "{rates:?}");
        }
    }

    #[test]
    fn zero_limit_is_rejected() {
        let sc = scenario(16);
        let eta = CrlbTargets::unconstrained().with(Parameter::Range, 0.0);
        assert!(matches!(
            optimize_power(&sc, &eta),
            Err(Error::InvalidConfig(_))
        ));
    }
}
