//! Serial-parallel baseline: MUSIC for the DoAs, projection onto the
//! estimated receive steering matrix, then a spatially smoothed 2D-MUSIC
//! over (velocity, range) on each carrier group.

use std::f64::consts::PI;

use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::model::{
    steering_rx, CMatrix, CVector, EchoTensor, Scenario, SystemConfig, C64, SPEED_OF_LIGHT,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MusicOptions {
    /// DoA grid step (degrees).
    pub doa_step_deg: f64,
    /// Velocity search window and grid step (m/s).
    pub velocity_window: (f64, f64),
    pub velocity_step: f64,
    /// Range search window and grid step (m).
    pub range_window: (f64, f64),
    pub range_step: f64,
    /// Dimension of the signal subspace in the 2D search.
    pub signal_dim: usize,
}

impl Default for MusicOptions {
    fn default() -> Self {
        MusicOptions {
            doa_step_deg: 0.05,
            velocity_window: (-60.0, 60.0),
            velocity_step: 0.1,
            range_window: (0.0, 3000.0),
            range_step: 1.0,
            signal_dim: 1,
        }
    }
}

/// Golden-section maximization of `f` on `[a, b]`.
fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Sample spatial covariance over all `N Q` snapshots.
pub fn spatial_covariance(t: &EchoTensor) -> CMatrix {
    let (mr, n_sc, q_count) = t.dims();
    let y = CMatrix::from_column_slice(mr, n_sc * q_count, t.data());
    (&y * y.adjoint()) / C64::new((n_sc * q_count) as f64, 0.0)
}

/// Noise-subspace projector complement: `P(β) = 1 / ||E_n^H a_r(β)||^2`.
struct DoaSpectrum {
    noise: CMatrix,
    ratio: f64,
}

impl DoaSpectrum {
    fn new(cov: &CMatrix, k: usize, ratio: f64) -> Self {
        let eig = SymmetricEigen::new(cov.clone());
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let m = cov.nrows();
        let noise = CMatrix::from_fn(m, m - k, |i, j| eig.eigenvectors[(i, order[j])]);
        DoaSpectrum { noise, ratio }
    }

    fn value(&self, beta: f64) -> f64 {
        let a = steering_rx(beta, self.noise.nrows(), self.ratio);
        let proj = self.noise.ad_mul(&a);
        1.0 / proj.norm_squared().max(1e-300)
    }
}

/// `k` DoAs (rad, ascending) from the spatial MUSIC pseudospectrum.
pub fn music_doa(
    t: &EchoTensor,
    k: usize,
    cfg: &SystemConfig,
    opts: &MusicOptions,
) -> Result<Vec<f64>> {
    let mr = t.dims().0;
    if k == 0 || k >= mr {
        return Err(Error::InvalidConfig(format!(
            "MUSIC needs 1 <= K < M_R, got K={k}, M_R={mr}"
        )));
    }
    let spectrum = DoaSpectrum::new(&spatial_covariance(t), k, cfg.spacing_ratio());
    let step = opts.doa_step_deg.to_radians();
    let limit = (90.0 - opts.doa_step_deg).to_radians();
    let count = (2.0 * limit / step).round() as usize + 1;
    let grid: Vec<f64> = (0..count).map(|i| -limit + i as f64 * step).collect();
    let vals: Vec<f64> = grid.iter().map(|&b| spectrum.value(b)).collect();
    let mut peaks: Vec<usize> = (0..count)
        .filter(|&i| {
            let left = i == 0 || vals[i] > vals[i - 1];
            let right = i + 1 == count || vals[i] >= vals[i + 1];
            left && right
        })
        .collect();
    peaks.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    if peaks.len() < k {
        return Err(Error::UnresolvedPeaks {
            wanted: k,
            found: peaks.len(),
            peaks_deg: peaks.iter().map(|&i| grid[i].to_degrees()).collect(),
        });
    }
    let mut out: Vec<f64> = peaks[..k]
        .iter()
        .map(|&i| {
            let lo = (grid[i] - step).max(-PI / 2.0 + 1e-9);
            let hi = (grid[i] + step).min(PI / 2.0 - 1e-9);
            golden_max(|b| spectrum.value(b), lo, hi, 1e-10)
        })
        .collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Scalar per-group data after projection: one `Q × |N_k|` matrix per carrier set.
#[derive(Clone, Debug)]
pub struct ProjectedGroups {
    pub groups: Vec<CMatrix>,
    /// Row-sum weights `1^T Â_R^†`.
    pub row_sum: CVector,
}

fn steering_matrix(betas: &[f64], mr: usize, ratio: f64) -> CMatrix {
    let mut a = CMatrix::zeros(mr, betas.len());
    for (k, &b) in betas.iter().enumerate() {
        a.set_column(k, &steering_rx(b, mr, ratio));
    }
    a
}

/// Project every snapshot with `Â_R^†`, sum the rows and slice by carrier set.
pub fn project_and_group(
    t: &EchoTensor,
    beta_hats: &[f64],
    scenario: &Scenario,
) -> Result<ProjectedGroups> {
    let (mr, _, q_count) = t.dims();
    let k = beta_hats.len();
    if k == 0 || k > mr {
        return Err(Error::InvalidConfig(format!(
            "projection needs 1 <= K <= M_R, got K={k}"
        )));
    }
    let a = steering_matrix(beta_hats, mr, scenario.config.spacing_ratio());
    let sv = a.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let cond = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if !(cond <= 1e8) {
        return Err(Error::IllConditionedProjection(cond));
    }
    let gram = a.ad_mul(&a);
    let pinv = gram
        .try_inverse()
        .ok_or(Error::IllConditionedProjection(cond))?
        * a.adjoint();
    let row_sum = CVector::from_fn(mr, |m, _| pinv.column(m).sum());
    let groups = scenario
        .carrier_sets
        .iter()
        .map(|set| {
            CMatrix::from_fn(q_count, set.len(), |q, i| {
                let snap = t.snapshot(set.start + i, q);
                row_sum.iter().zip(snap).map(|(w, y)| w * y).sum()
            })
        })
        .collect();
    Ok(ProjectedGroups { groups, row_sum })
}

/// `B'_k = 1^T Â_R^† a_r(β_k)` for true DoAs `betas`.
pub fn row_sum_gains(projected: &ProjectedGroups, betas: &[f64], cfg: &SystemConfig) -> Vec<C64> {
    let mr = projected.row_sum.len();
    betas
        .iter()
        .map(|&b| {
            let a = steering_rx(b, mr, cfg.spacing_ratio());
            projected
                .row_sum
                .iter()
                .zip(a.iter())
                .map(|(w, x)| w * x)
                .sum()
        })
        .collect()
}

/// Signal subspace of the spatially smoothed covariance of `data`
/// (sub-blocks `l1 × l2`), by block power iteration on the implicit matrix.
fn smoothed_signal_subspace(data: &CMatrix, l1: usize, l2: usize, dim: usize) -> CMatrix {
    let (rows, cols) = data.shape();
    let len = l1 * l2;
    let mut blocks: Vec<CVector> = Vec::with_capacity((rows - l1 + 1) * (cols - l2 + 1));
    for a in 0..=rows - l1 {
        for b in 0..=cols - l2 {
            // column-major over (l1, l2): index i + l1 * j
            blocks.push(CVector::from_fn(len, |idx, _| {
                data[(a + idx % l1, b + idx / l1)]
            }));
        }
    }
    let x = CMatrix::from_columns(&blocks);
    let apply = |v: &CMatrix| &x * x.ad_mul(v);
    let mut v = CMatrix::from_fn(len, dim, |i, j| {
        if j == 0 {
            blocks[0][i]
        } else {
            C64::new(
                ((i * 7 + j * 13) % 11) as f64 - 5.0,
                ((i * 3 + j) % 5) as f64 - 2.0,
            )
        }
    });
    let mut prev = f64::INFINITY;
    for _ in 0..500 {
        let w = apply(&v);
        let qr = w.qr();
        let q = qr.q();
        let r = qr.r();
        let trace: f64 = (0..dim).map(|i| r[(i, i)].norm()).sum();
        let done = (trace - prev).abs() <= 1e-12 * trace;
        v = q;
        prev = trace;
        if done {
            break;
        }
    }
    v
}

/// `(v̂, r̂)` of the dominant component in a `Q × |N_k|` group matrix.
pub fn music_2d(data: &CMatrix, cfg: &SystemConfig, opts: &MusicOptions) -> Result<(f64, f64)> {
    let (q_count, width) = data.shape();
    if q_count < 2 {
        return Err(Error::InvalidConfig(
            "2D-MUSIC needs at least 2 blocks".into(),
        ));
    }
    if width < 2 {
        return Err(Error::RangeUnobservable(width));
    }
    let (v_lo, v_hi) = opts.velocity_window;
    let (r_lo, r_hi) = opts.range_window;
    let v_max = cfg.max_unambiguous_velocity();
    let r_max = cfg.max_unambiguous_range();
    if !(v_lo < v_hi && v_lo >= -v_max && v_hi <= v_max) {
        return Err(Error::GridOutOfRange(format!(
            "velocity window [{v_lo}, {v_hi}] exceeds the unambiguous span ±{v_max:.2} m/s"
        )));
    }
    if !(r_lo < r_hi && r_lo >= 0.0 && r_hi < r_max) {
        return Err(Error::GridOutOfRange(format!(
            "range window [{r_lo}, {r_hi}] exceeds the unambiguous span [0, {r_max:.1}) m"
        )));
    }
    let l1 = q_count.div_ceil(2);
    let l2 = width.div_ceil(2);
    let dim = opts.signal_dim.clamp(1, l1 * l2 - 1);
    let es = smoothed_signal_subspace(data, l1, l2, dim);

    let lambda = cfg.wavelength();
    let ts = cfg.block_duration();
    let df = cfg.subcarrier_spacing_hz;
    let norm = 1.0 / (l1 * l2) as f64;
    // |E_s^H s(v, r)|^2 with s separable: s[i + l1 j] = u(v)^i w(r)^j / sqrt(l1 l2)
    let tone = |len: usize, phase: f64| -> Vec<C64> {
        (0..len)
            .map(|i| C64::from_polar(1.0, phase * i as f64))
            .collect()
    };
    let score_with = |u: &[C64], w: &[C64]| -> f64 {
        let mut total = 0.0;
        for d in 0..dim {
            let mut acc = C64::new(0.0, 0.0);
            for j in 0..l2 {
                let mut inner = C64::new(0.0, 0.0);
                for i in 0..l1 {
                    inner += es[(i + l1 * j, d)].conj() * u[i];
                }
                acc += inner * w[j];
            }
            total += acc.norm_sqr();
        }
        total * norm
    };
    let u_of = |v: f64| tone(l1, 2.0 * PI * v / lambda * ts);
    let w_of = |r: f64| tone(l2, -2.0 * PI * df * r / SPEED_OF_LIGHT);
    let score = |v: f64, r: f64| score_with(&u_of(v), &w_of(r));

    // coarse grid, then the fine grid around the coarse maximum
    let coarse_v = (10.0 * opts.velocity_step).max(opts.velocity_step);
    let coarse_r = (10.0 * opts.range_step).max(opts.range_step);
    let grid_max = |v0: f64, v1: f64, dv: f64, r0: f64, r1: f64, dr: f64| {
        let nv = ((v1 - v0) / dv).round() as usize + 1;
        let nr = ((r1 - r0) / dr).round() as usize + 1;
        let ws: Vec<Vec<C64>> = (0..nr).map(|j| w_of(r0 + j as f64 * dr)).collect();
        let mut best = (f64::NEG_INFINITY, v0, r0);
        for i in 0..nv {
            let v = v0 + i as f64 * dv;
            let u = u_of(v);
            for (j, w) in ws.iter().enumerate() {
                let s = score_with(&u, w);
                if s > best.0 {
                    best = (s, v, r0 + j as f64 * dr);
                }
            }
        }
        best
    };
    let (_, vc, rc) = grid_max(v_lo, v_hi, coarse_v, r_lo, r_hi, coarse_r);
    let (_, vf, rf) = grid_max(
        (vc - coarse_v).max(v_lo),
        (vc + coarse_v).min(v_hi),
        opts.velocity_step,
        (rc - coarse_r).max(r_lo),
        (rc + coarse_r).min(r_hi),
        opts.range_step,
    );
    // alternating golden-section refinement inside one fine cell
    let (mut v, mut r) = (vf, rf);
    for _ in 0..4 {
        v = golden_max(
            |x| score(x, r),
            v - opts.velocity_step,
            v + opts.velocity_step,
            1e-9,
        );
        r = golden_max(
            |x| score(v, x),
            r - opts.range_step,
            r + opts.range_step,
            1e-7,
        );
    }
    Ok((v, r))
}

/// Serial-parallel estimates. DoAs are unordered; `velocity_range[k]` comes
/// from carrier group `k`.
#[derive(Clone, Debug)]
pub struct SpEstimate {
    pub doa: Vec<f64>,
    pub velocity_range: Vec<(f64, f64)>,
}

pub fn sp_estimate(t: &EchoTensor, scenario: &Scenario, opts: &MusicOptions) -> Result<SpEstimate> {
    let k = scenario.num_targets();
    let doa = music_doa(t, k, &scenario.config, opts)?;
    let projected = project_and_group(t, &doa, scenario)?;
    let velocity_range = projected
        .groups
        .iter()
        .map(|g| music_2d(g, &scenario.config, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(SpEstimate {
        doa,
        velocity_range,
    })
}
