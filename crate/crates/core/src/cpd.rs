//! CPD (PARAFAC) estimation of DoA, velocity and range.
//!
//! The echo tensor is factored as `Σ_k a_r,k ∘ b_k ∘ c_k` by alternating
//! least squares. Each factor column is a (possibly amplitude-weighted)
//! complex exponential whose frequency maps to one physical parameter:
//! `A_R` to the DoA sine, `C` to the Doppler and the in-group part of `B` to
//! the delay. Frequencies come from a zero-padded DFT peak followed by a
//! weighted phase-slope fit.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::model::{CMatrix, EchoTensor, Scenario, SystemConfig, C64, SPEED_OF_LIGHT};

/// Tensor unfolding `Y_1`, `Y_2` or `Y_3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// `Q M_R × N`, row `m + q M_R`.
    One,
    /// `N Q × M_R`, row `q + n Q`.
    Two,
    /// `M_R N × Q`, row `n + m N`.
    Three,
}

pub fn unfold(t: &EchoTensor, mode: Mode) -> CMatrix {
    let (mr, n_sc, q_count) = t.dims();
    let data = t.data();
    match mode {
        Mode::One => CMatrix::from_column_slice(mr * q_count, n_sc, data),
        Mode::Two => CMatrix::from_column_slice(mr, q_count * n_sc, data).transpose(),
        Mode::Three => CMatrix::from_fn(mr * n_sc, q_count, |row, q| {
            let (n, m) = (row % n_sc, row / n_sc);
            t.get(m, n, q)
        }),
    }
}

/// Inverse of [`unfold`]: flat tensor data in [`EchoTensor`] storage order.
pub fn refold(y: &CMatrix, mode: Mode, dims: (usize, usize, usize)) -> Result<Vec<C64>> {
    let (mr, n_sc, q_count) = dims;
    let expect = match mode {
        Mode::One => (mr * q_count, n_sc),
        Mode::Two => (n_sc * q_count, mr),
        Mode::Three => (mr * n_sc, q_count),
    };
    if y.shape() != expect {
        return Err(Error::Dimension(format!(
            "unfolding has shape {:?}, expected {:?}",
            y.shape(),
            expect
        )));
    }
    let mut out = vec![C64::new(0.0, 0.0); mr * n_sc * q_count];
    for n in 0..n_sc {
        for q in 0..q_count {
            for m in 0..mr {
                out[m + mr * (q + q_count * n)] = match mode {
                    Mode::One => y[(m + q * mr, n)],
                    Mode::Two => y[(q + n * q_count, m)],
                    Mode::Three => y[(n + m * n_sc, q)],
                };
            }
        }
    }
    Ok(out)
}

/// Column-wise Kronecker product; row `i R + j` of column `k` is `x[i,k] y[j,k]`.
pub fn khatri_rao(x: &CMatrix, y: &CMatrix) -> CMatrix {
    assert_eq!(
        x.ncols(),
        y.ncols(),
        "Khatri-Rao operands need equal column counts"
    );
    let r = y.nrows();
    CMatrix::from_fn(x.nrows() * r, x.ncols(), |row, k| {
        x[(row / r, k)] * y[(row % r, k)]
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CpdOptions {
    /// Number of starting points; the best final fit is kept.
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop when the relative change of the fit falls below this.
    pub tol: f64,
    /// Make the first start algebraic (generalized eigendecomposition of
    /// two slice mixtures) instead of random. Needs `K <= M_R` and `K <= Q`;
    /// otherwise that start is random too.
    pub algebraic_start: bool,
}

impl Default for CpdOptions {
    fn default() -> Self {
        CpdOptions {
            restarts: 5,
            max_iter: 500,
            tol: 1e-10,
            algebraic_start: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CpdResult {
    /// `M_R × K`, unit-norm columns.
    pub a: CMatrix,
    /// `N × K`, unit-norm columns.
    pub b: CMatrix,
    /// `Q × K`, carries the scale.
    pub c: CMatrix,
    /// `||Y - S||_F / ||Y||_F`.
    pub fit: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `||Y - S||_F^2` after every sweep of the winning run.
    pub objective: Vec<f64>,
    /// Restarts abandoned because a Khatri-Rao Gram matrix was singular.
    pub failed_restarts: usize,
}

impl CpdResult {
    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    /// `Σ_k a_k ∘ b_k ∘ c_k` in [`EchoTensor`] storage order.
    pub fn reconstruct(&self) -> Vec<C64> {
        let s1 = khatri_rao(&self.c, &self.a) * self.b.transpose();
        s1.as_slice().to_vec()
    }
}

fn random_factor<R: Rng + ?Sized>(rows: usize, k: usize, rng: &mut R) -> CMatrix {
    CMatrix::from_fn(rows, k, |_, _| {
        C64::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        )
    })
}

/// `G^{-1} R`, transposed back into a factor matrix. `G` is the Gram of the
/// Khatri-Rao design and `R` its product with the data.
fn solve_gram(gram: CMatrix, rhs: &CMatrix) -> Option<CMatrix> {
    let scale = gram.diagonal().iter().map(|z| z.re).fold(0.0, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let chol = Cholesky::new(gram)?;
    // reject numerically rank-deficient Grams that Cholesky still accepts
    let min_pivot = chol
        .l()
        .diagonal()
        .iter()
        .map(|z| z.re)
        .fold(f64::INFINITY, f64::min);
    if !(min_pivot * min_pivot > 1e-14 * scale) {
        return None;
    }
    Some(chol.solve(rhs).transpose())
}

fn normalize(a: &mut CMatrix, b: &mut CMatrix, c: &mut CMatrix) {
    for k in 0..a.ncols() {
        let na = a.column(k).norm();
        let nb = b.column(k).norm();
        if na > 0.0 && nb > 0.0 {
            a.column_mut(k).unscale_mut(na);
            b.column_mut(k).unscale_mut(nb);
            c.column_mut(k).scale_mut(na * nb);
        }
    }
}

/// One pass over the data: the residual `||Y - [[A, B, C]]||^2` and the
/// B-update right-hand side `(C ⊙ A)^H Y_(1)` (`K × N`).
fn residual_and_b_rhs(
    y: &[C64],
    dims: (usize, usize, usize),
    a: &CMatrix,
    b: &CMatrix,
    c: &CMatrix,
) -> (f64, CMatrix) {
    let (mr, n_sc, q_count) = dims;
    let k = a.ncols();
    let a_conj = a.conjugate();
    let mut rhs = CMatrix::zeros(k, n_sc);
    let mut res = 0.0;
    let mut s = vec![C64::new(0.0, 0.0); mr];
    for n in 0..n_sc {
        for q in 0..q_count {
            let base = mr * (q + q_count * n);
            let yq = &y[base..base + mr];
            s.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
            for j in 0..k {
                let w = b[(n, j)] * c[(q, j)];
                let col = a.column(j);
                let colc = a_conj.column(j);
                let mut u = C64::new(0.0, 0.0);
                for m in 0..mr {
                    s[m] += col[m] * w;
                    u += colc[m] * yq[m];
                }
                rhs[(j, n)] += c[(q, j)].conj() * u;
            }
            res += yq
                .iter()
                .zip(&s)
                .map(|(v, z)| (v - z).norm_sqr())
                .sum::<f64>();
        }
    }
    (res, rhs)
}

/// `T[q, k, m] = Σ_n conj(b_nk) y(m, n, q)`, flattened as `(q K + k) M + m`.
fn contract_b(y: &[C64], dims: (usize, usize, usize), b: &CMatrix) -> Vec<C64> {
    let (mr, n_sc, q_count) = dims;
    let k = b.ncols();
    let mut t = vec![C64::new(0.0, 0.0); q_count * mr * k];
    for n in 0..n_sc {
        for q in 0..q_count {
            let base = mr * (q + q_count * n);
            let yq = &y[base..base + mr];
            for j in 0..k {
                let w = b[(n, j)].conj();
                let out = &mut t[(q * k + j) * mr..(q * k + j + 1) * mr];
                for (o, v) in out.iter_mut().zip(yq) {
                    *o += w * v;
                }
            }
        }
    }
    t
}

/// Leading `k` eigenvectors of a Hermitian matrix.
fn leading_eigvecs(h: CMatrix, k: usize) -> CMatrix {
    let eig = nalgebra::SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    CMatrix::from_fn(eig.eigenvectors.nrows(), k, |r, c| {
        eig.eigenvectors[(r, order[c])]
    })
}

/// Eigenvectors of a general complex matrix from its Schur form.
fn eigenvectors(m: CMatrix) -> CMatrix {
    let k = m.nrows();
    let (q, t) = nalgebra::Schur::new(m).unpack();
    let scale = t.norm().max(f64::MIN_POSITIVE);
    let mut x = CMatrix::zeros(k, k);
    for i in 0..k {
        x[(i, i)] = C64::new(1.0, 0.0);
        for j in (0..i).rev() {
            let s: C64 = (j + 1..=i).map(|l| t[(j, l)] * x[(l, i)]).sum();
            let mut d = t[(j, j)] - t[(i, i)];
            if d.norm() < 1e-14 * scale {
                d = C64::new(1e-14 * scale, 0.0);
            }
            x[(j, i)] = -s / d;
        }
    }
    q * x
}

/// Starting `(A, C)` from two random mixtures of the subcarrier slices
/// `Y_n = A D_n(B) C^T`, compressed onto the leading mode-1 and mode-3
/// subspaces. Exact for noiseless rank-`k` data with full-rank factors.
fn algebraic_start<R: Rng + ?Sized>(
    y: &[C64],
    dims: (usize, usize, usize),
    k: usize,
    rng: &mut R,
) -> Option<(CMatrix, CMatrix)> {
    let (mr, n_sc, q_count) = dims;
    if k > mr || k > q_count {
        return None;
    }
    let slice = |n: usize| {
        CMatrix::from_column_slice(mr, q_count, &y[mr * q_count * n..mr * q_count * (n + 1)])
    };
    let y1 = CMatrix::from_column_slice(mr, n_sc * q_count, y);
    let u = leading_eigvecs(&y1 * y1.adjoint(), k);
    let mut g3 = CMatrix::zeros(q_count, q_count);
    for n in 0..n_sc {
        let yn = slice(n);
        g3 += yn.transpose() * yn.conjugate();
    }
    let w = leading_eigvecs(g3, k).conjugate();
    let compressed: Vec<CMatrix> = (0..n_sc).map(|n| u.ad_mul(&slice(n)) * &w).collect();
    let mix = |rng: &mut R| {
        let weights = random_factor(n_sc, 1, rng);
        compressed
            .iter()
            .zip(weights.iter())
            .fold(CMatrix::zeros(k, k), |acc, (g, x)| acc + g * *x)
    };
    let s1 = mix(rng);
    let s2 = mix(rng);
    let a = &u * eigenvectors(s1 * s2.try_inverse()?);
    if !a.iter().all(|z| z.is_finite()) {
        return None;
    }
    // rows of A^+ Y_(1) are c_k ⊗ b_k; take the dominant block-side factor of each
    let z = a.clone().pseudo_inverse(1e-12).ok()? * y1;
    let mut c = CMatrix::zeros(q_count, k);
    for j in 0..k {
        let zk = CMatrix::from_fn(q_count, n_sc, |q, n| z[(j, q + q_count * n)]);
        c.set_column(j, &leading_eigvecs(&zk * zk.adjoint(), 1).column(0));
    }
    Some((a, c))
}

struct Run {
    a: CMatrix,
    b: CMatrix,
    c: CMatrix,
    objective: Vec<f64>,
    converged: bool,
}

/// ALS sweeps in the order B, A, C. The objective of each sweep is the exact
/// residual; it is evaluated in the same pass as the next B update.
fn als_run(
    y: &[C64],
    dims: (usize, usize, usize),
    start: (CMatrix, CMatrix),
    opts: &CpdOptions,
    norm_sq: f64,
) -> Option<Run> {
    let (mr, n_sc, q_count) = dims;
    let (mut a, mut c) = start;
    let k = a.ncols();
    let mut b = CMatrix::zeros(n_sc, k);
    let mut objective: Vec<f64> = Vec::new();
    let mut converged = false;
    for sweep in 0..=opts.max_iter {
        let (obj, rhs_b) = residual_and_b_rhs(y, dims, &a, &b, &c);
        if sweep > 0 {
            let fit = (obj / norm_sq).sqrt();
            let done = match objective.last() {
                Some(&prev) => {
                    let prev_fit = (prev / norm_sq).sqrt();
                    (prev_fit - fit).abs() <= opts.tol * prev_fit
                }
                None => false,
            };
            objective.push(obj);
            if done || fit < 1e-14 {
                converged = true;
                break;
            }
            if sweep == opts.max_iter {
                break;
            }
        }
        let (ga, gc) = (a.ad_mul(&a), c.ad_mul(&c));
        b = solve_gram(gc.component_mul(&ga), &rhs_b)?;
        let t = contract_b(y, dims, &b);
        let gb = b.ad_mul(&b);
        let mut rhs_a = CMatrix::zeros(k, mr);
        for q in 0..q_count {
            for m in 0..mr {
                for j in 0..k {
                    rhs_a[(j, m)] += c[(q, j)].conj() * t[(q * k + j) * mr + m];
                }
            }
        }
        a = solve_gram(gb.component_mul(&gc), &rhs_a)?;
        let mut rhs_c = CMatrix::zeros(k, q_count);
        for q in 0..q_count {
            for m in 0..mr {
                for j in 0..k {
                    rhs_c[(j, q)] += a[(m, j)].conj() * t[(q * k + j) * mr + m];
                }
            }
        }
        c = solve_gram(a.ad_mul(&a).component_mul(&gb), &rhs_c)?;
        normalize(&mut a, &mut b, &mut c);
    }
    Some(Run {
        a,
        b,
        c,
        objective,
        converged,
    })
}

/// Rank-`k` CPD by alternating least squares, best of `opts.restarts` random starts.
pub fn cpd_als<R: Rng + ?Sized>(
    t: &EchoTensor,
    k: usize,
    opts: &CpdOptions,
    rng: &mut R,
) -> Result<CpdResult> {
    let dims = t.dims();
    let (mr, n_sc, q_count) = dims;
    if k == 0 || k > mr.max(n_sc).max(q_count) {
        return Err(Error::InvalidConfig(format!(
            "CPD rank {k} outside 1..={}",
            mr.max(n_sc).max(q_count)
        )));
    }
    let norm_sq = t.frobenius_sq();
    if !(norm_sq > 0.0) {
        return Err(Error::Estimation("echo tensor is identically zero".into()));
    }
    let mut best: Option<Run> = None;
    let mut failed = 0;
    for restart in 0..opts.restarts.max(1) {
        let start = match (restart, opts.algebraic_start) {
            (0, true) => algebraic_start(t.data(), dims, k, rng),
            _ => None,
        }
        .unwrap_or_else(|| (random_factor(mr, k, rng), random_factor(q_count, k, rng)));
        match als_run(t.data(), dims, start, opts, norm_sq) {
            Some(run) => {
                let better = best
                    .as_ref()
                    .is_none_or(|b| run.objective.last() < b.objective.last());
                if better {
                    best = Some(run);
                }
            }
            None => failed += 1,
        }
    }
    let run = best.ok_or_else(|| {
        Error::Estimation(format!(
            "all {failed} ALS restarts hit a rank-deficient Khatri-Rao product"
        ))
    })?;
    let fit = (run.objective.last().copied().unwrap_or(norm_sq) / norm_sq).sqrt();
    Ok(CpdResult {
        iterations: run.objective.len(),
        a: run.a,
        b: run.b,
        c: run.c,
        fit,
        converged: run.converged,
        objective: run.objective,
        failed_restarts: failed,
    })
}

/// Kruskal rank: the largest `r` such that every `r` columns are independent.
pub fn kruskal_rank(m: &CMatrix, tol: f64) -> usize {
    let k = m.ncols();
    let mut cols = m.clone();
    for j in 0..k {
        let n = cols.column(j).norm();
        if n > 0.0 {
            cols.column_mut(j).unscale_mut(n);
        }
    }
    let full_rank = |subset: &[usize]| {
        let sub = CMatrix::from_fn(cols.nrows(), subset.len(), |i, j| cols[(i, subset[j])]);
        if sub.nrows() < subset.len() {
            return false;
        }
        let sv = sub.singular_values();
        sv.iter().all(|&s| s > tol)
    };
    let mut r = 0;
    for size in 1..=k {
        let mut ok = true;
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            if !full_rank(&idx) {
                ok = false;
                break;
            }
            // next combination
            let mut i = size;
            while i > 0 && idx[i - 1] == k - size + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            idx[i - 1] += 1;
            for j in i..size {
                idx[j] = idx[j - 1] + 1;
            }
        }
        if !ok {
            break;
        }
        r = size;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Uniqueness {
    pub unique: bool,
    pub kruskal_sum: usize,
}

/// Kruskal's sufficient condition `k_A + k_B + k_C ≥ 2K + 2` for the scenario's
/// own factors. `k_B = K` whenever picking each group's strongest subcarrier
/// gives a diagonally dominant `K × K` submatrix.
pub fn check_uniqueness(
    scenario: &Scenario,
    p: &[f64],
    bf: &crate::model::Beamforming,
) -> Result<Uniqueness> {
    let f = crate::model::factor_matrices(scenario, p, bf)?;
    let k = scenario.num_targets();
    let tol = 1e-8;
    let k_a = kruskal_rank(&f.a_r, tol);
    let k_c = kruskal_rank(&f.c, tol);
    let dominant = scenario.carrier_sets.iter().enumerate().all(|(j, set)| {
        let Some(n) = set
            .clone()
            .max_by(|&x, &y| f.b[(x, j)].norm().total_cmp(&f.b[(y, j)].norm()))
        else {
            return false;
        };
        let own = f.b[(n, j)].norm();
        let other: f64 = (0..k).filter(|&i| i != j).map(|i| f.b[(n, i)].norm()).sum();
        own > other
    });
    let k_b = if dominant { k } else { kruskal_rank(&f.b, tol) };
    let kruskal_sum = k_a + k_b + k_c;
    let no_zero_slab = f.a_r.iter().any(|z| z.norm() > 0.0)
        && f.b.iter().any(|z| z.norm() > 0.0)
        && f.c.iter().any(|z| z.norm() > 0.0);
    Ok(Uniqueness {
        unique: kruskal_sum >= 2 * k + 2 || (k == 1 && no_zero_slab),
        kruskal_sum,
    })
}

/// Frequency estimation strategy for the factor columns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PeakMode {
    /// DFT grid peak only.
    ArgmaxOnly,
    /// Grid peak followed by a weighted phase-slope fit.
    #[default]
    Refined,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecoveryOptions {
    pub oversample: usize,
    pub peak: PeakMode,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        RecoveryOptions {
            oversample: 16,
            peak: PeakMode::Refined,
        }
    }
}

/// Normalized frequency in cycles per sample, on `[-0.5, 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tone {
    pub frequency: f64,
    pub refined: bool,
    pub low_confidence: bool,
}

const PHASE_RMS_LIMIT: f64 = 0.5;

fn wrap_half(x: f64) -> f64 {
    x - (x + 0.5).floor()
}

/// Dominant frequency of `x[i] ≈ α exp(j 2π ν i)`.
pub fn estimate_tone(x: &[C64], opts: &RecoveryOptions) -> Result<Tone> {
    estimate_tone_with(x, opts, &mut FftPlanner::new())
}

fn estimate_tone_with(
    x: &[C64],
    opts: &RecoveryOptions,
    planner: &mut FftPlanner<f64>,
) -> Result<Tone> {
    let len = x.len();
    let energy: f64 = x.iter().map(|z| z.norm_sqr()).sum();
    if len == 0 || !(energy > 0.0) {
        return Err(Error::Estimation(
            "cannot estimate a frequency from a zero vector".into(),
        ));
    }
    if len == 1 {
        return Ok(Tone {
            frequency: 0.0,
            refined: false,
            low_confidence: true,
        });
    }
    let size = len.next_power_of_two() * opts.oversample.max(1);
    let fft: Arc<dyn Fft<f64>> = planner.plan_fft_forward(size);
    let mut buf = vec![C64::new(0.0, 0.0); size];
    buf[..len].copy_from_slice(x);
    fft.process(&mut buf);
    let peak = buf
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm_sqr().total_cmp(&b.1.norm_sqr()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let grid = wrap_half(peak as f64 / size as f64);

    let weights: Vec<f64> = x.iter().map(|z| z.norm_sqr()).collect();
    let fit_pass = |nu: f64| {
        let z: Vec<C64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| v * C64::from_polar(1.0, -2.0 * PI * nu * i as f64))
            .collect();
        let mean: C64 = z.iter().sum();
        let ref_phase = mean.arg();
        let u: Vec<f64> = z
            .iter()
            .map(|v| (v * C64::from_polar(1.0, -ref_phase)).arg())
            .collect();
        let wsum: f64 = weights.iter().sum();
        let ibar = weights
            .iter()
            .enumerate()
            .map(|(i, w)| w * i as f64)
            .sum::<f64>()
            / wsum;
        let ubar = weights.iter().zip(&u).map(|(w, v)| w * v).sum::<f64>() / wsum;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        for (i, (w, v)) in weights.iter().zip(&u).enumerate() {
            let di = i as f64 - ibar;
            sxy += w * di * (v - ubar);
            sxx += w * di * di;
        }
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        let rms = (weights
            .iter()
            .zip(&u)
            .enumerate()
            .map(|(i, (w, v))| w * (v - ubar - slope * (i as f64 - ibar)).powi(2))
            .sum::<f64>()
            / wsum)
            .sqrt();
        (nu + slope / (2.0 * PI), rms)
    };

    if opts.peak == PeakMode::ArgmaxOnly {
        let (_, rms) = fit_pass(grid);
        return Ok(Tone {
            frequency: grid,
            refined: false,
            low_confidence: rms > PHASE_RMS_LIMIT,
        });
    }
    let (nu1, _) = fit_pass(grid);
    let (nu2, _) = fit_pass(nu1);
    let (_, rms) = fit_pass(nu2);
    let bin = 1.0 / len as f64;
    if (nu2 - grid).abs() > bin || !nu2.is_finite() {
        let (_, rms_grid) = fit_pass(grid);
        return Ok(Tone {
            frequency: grid,
            refined: false,
            low_confidence: rms_grid > PHASE_RMS_LIMIT,
        });
    }
    Ok(Tone {
        frequency: wrap_half(nu2),
        refined: true,
        low_confidence: rms > PHASE_RMS_LIMIT,
    })
}

/// A recovered physical value with its tone diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recovered {
    pub value: f64,
    pub refined: bool,
    pub low_confidence: bool,
}

fn recovered(value: f64, tone: Tone) -> Recovered {
    Recovered {
        value,
        refined: tone.refined,
        low_confidence: tone.low_confidence,
    }
}

fn sine_to_angle(s: f64) -> f64 {
    s.clamp(-1.0 + 1e-15, 1.0 - 1e-15).asin()
}

/// DoA (rad) from a receive-steering column.
pub fn recover_doa(a_col: &[C64], cfg: &SystemConfig, opts: &RecoveryOptions) -> Result<Recovered> {
    let tone = estimate_tone(a_col, opts)?;
    Ok(recovered(
        sine_to_angle(-tone.frequency / cfg.spacing_ratio()),
        tone,
    ))
}

/// Radial velocity (m/s) from a Doppler column.
pub fn recover_velocity(
    c_col: &[C64],
    cfg: &SystemConfig,
    opts: &RecoveryOptions,
) -> Result<Recovered> {
    let tone = estimate_tone(c_col, opts)?;
    Ok(recovered(
        cfg.wavelength() * tone.frequency / cfg.block_duration(),
        tone,
    ))
}

/// Bistatic range (m) from the in-group part of a delay column. Samples are
/// indexed relative to the start of `carrier_set`.
pub fn recover_range(
    b_col: &[C64],
    carrier_set: std::ops::Range<usize>,
    cfg: &SystemConfig,
    opts: &RecoveryOptions,
) -> Result<Recovered> {
    if carrier_set.len() < 2 {
        return Err(Error::RangeUnobservable(carrier_set.len()));
    }
    if carrier_set.end > b_col.len() {
        return Err(Error::Dimension(
            "carrier set exceeds the delay column".into(),
        ));
    }
    let tone = estimate_tone(&b_col[carrier_set], opts)?;
    let mut fraction = -tone.frequency;
    if fraction < 0.0 {
        fraction += 1.0;
    }
    Ok(recovered(
        SPEED_OF_LIGHT * fraction / cfg.subcarrier_spacing_hz,
        tone,
    ))
}

/// Assignment maximizing `Σ_i score[i][perm[i]]`; rows and columns must agree in number.
/// Exhaustive up to 8, greedy above.
pub fn best_assignment(score: &DMatrix<f64>) -> Vec<usize> {
    let k = score.nrows();
    if k <= 8 {
        let mut perm: Vec<usize> = (0..k).collect();
        let mut best = perm.clone();
        let mut best_val = f64::NEG_INFINITY;
        permute(&mut perm, 0, &mut |p| {
            let v: f64 = p.iter().enumerate().map(|(i, &j)| score[(i, j)]).sum();
            if v > best_val {
                best_val = v;
                best = p.to_vec();
            }
        });
        best
    } else {
        let mut taken = vec![false; k];
        let mut out = vec![0; k];
        let mut entries: Vec<(usize, usize)> =
            (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).collect();
        entries.sort_by(|a, b| score[(b.0, b.1)].total_cmp(&score[(a.0, a.1)]));
        let mut done = vec![false; k];
        for (i, j) in entries {
            if !done[i] && !taken[j] {
                out[i] = j;
                done[i] = true;
                taken[j] = true;
            }
        }
        out
    }
}

fn permute(p: &mut Vec<usize>, start: usize, visit: &mut dyn FnMut(&[usize])) {
    if start == p.len() {
        visit(p);
        return;
    }
    for i in start..p.len() {
        p.swap(start, i);
        permute(p, start + 1, visit);
        p.swap(start, i);
    }
}

/// One estimated target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetEstimate {
    pub doa: Recovered,
    pub velocity: Recovered,
    pub range: Recovered,
    /// Carrier set the factor column was associated with.
    pub group: usize,
}

#[derive(Clone, Debug)]
pub struct EstimationResult {
    pub targets: Vec<TargetEstimate>,
    pub fit: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Parameters from already-computed factors. Each column is tied to the
/// carrier set holding most of its in-group energy (one-to-one).
pub fn recover_parameters(
    a: &CMatrix,
    b: &CMatrix,
    c: &CMatrix,
    scenario: &Scenario,
    opts: &RecoveryOptions,
) -> Result<Vec<TargetEstimate>> {
    let k = a.ncols();
    if b.ncols() != k || c.ncols() != k || scenario.carrier_sets.len() != k {
        return Err(Error::Dimension(
            "factor ranks and carrier-set count differ".into(),
        ));
    }
    let cfg = &scenario.config;
    let score = DMatrix::from_fn(k, k, |col, g| {
        let total: f64 = b.column(col).norm_squared();
        let own: f64 = scenario.carrier_sets[g]
            .clone()
            .map(|n| b[(n, col)].norm_sqr())
            .sum();
        if total > 0.0 {
            own / total
        } else {
            0.0
        }
    });
    let groups = best_assignment(&score);
    (0..k)
        .map(|col| {
            let a_col: Vec<C64> = a.column(col).iter().copied().collect();
            let b_col: Vec<C64> = b.column(col).iter().copied().collect();
            let c_col: Vec<C64> = c.column(col).iter().copied().collect();
            let g = groups[col];
            Ok(TargetEstimate {
                doa: recover_doa(&a_col, cfg, opts)?,
                velocity: recover_velocity(&c_col, cfg, opts)?,
                range: recover_range(&b_col, scenario.carrier_sets[g].clone(), cfg, opts)?,
                group: g,
            })
        })
        .collect()
}

/// Full CPD pipeline on one echo. The target count and carrier sets are
/// taken from `scenario`; the ground truth in it is not used.
pub fn estimate<R: Rng + ?Sized>(
    t: &EchoTensor,
    scenario: &Scenario,
    cpd: &CpdOptions,
    recovery: &RecoveryOptions,
    rng: &mut R,
) -> Result<EstimationResult> {
    let (mr, n_sc, q_count) = t.dims();
    let cfg = &scenario.config;
    if (mr, n_sc, q_count) != (cfg.rx_elements, cfg.subcarriers, cfg.blocks) {
        return Err(Error::Dimension(
            "echo tensor does not match the scenario configuration".into(),
        ));
    }
    let res = cpd_als(t, scenario.num_targets(), cpd, rng)?;
    let targets = recover_parameters(&res.a, &res.b, &res.c, scenario, recovery)?;
    Ok(EstimationResult {
        targets,
        fit: res.fit,
        iterations: res.iterations,
        converged: res.converged,
    })
}

/// For evaluation only: `perm[i]` is the true target matched to estimate `i`,
/// minimizing the total absolute DoA error.
pub fn match_by_doa(estimated: &[f64], truth: &[f64]) -> Vec<usize> {
    let score = DMatrix::from_fn(estimated.len(), truth.len(), |i, j| {
        -(estimated[i] - truth[j]).abs()
    });
    best_assignment(&score)
}
