//! Lyapunov drift fits, total-variation estimates and mixing-rate fits,
//! and agreement checks for the invariant law.
//!
//! TV is always the half-sum `½ Σ |p_i − q_i|`, so it lies in `[0, 1]`.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_range, ErgoError, Result};
use crate::integrate::{euler_batch, euler_batch_at, ou_moments};
use crate::model::{LyapunovSpec, SdeModel};
use crate::rng::{self, label};
use crate::stats::{mean_se, normal_cdf, weighted_line_fit, HistogramSpec};

/// Lower edge of the usable TV range for rate fits.
pub const FIT_LO: f64 = 0.02;
/// Upper edge of the usable TV range for rate fits.
pub const FIT_HI: f64 = 0.98;
/// Samples required on each side of a histogram TV estimate.
pub const MIN_TV_SAMPLES: usize = 100;
/// Largest histogram dimension; project first above this.
pub const MAX_HIST_DIM: usize = 3;
/// Relative standard errors below this count as this in the decay fit.
/// Early points are precise but not yet on the exponential, and would
/// otherwise dominate the slope.
pub const REL_SE_FLOOR: f64 = 0.1;

// ---------------------------------------------------------------------------
// drift fit

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Small,
    Large,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftPoint {
    pub x: Vec<f64>,
    pub v: f64,
    /// Monte Carlo estimate of `E V(X_{t*}(x))`.
    pub estimate: f64,
    pub se: f64,
    pub subset: Subset,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftFit {
    /// `max(envelope_alpha, shell_ratio)`.
    pub alpha_hat: f64,
    /// `max (estimate − β) / V` over the large subset.
    pub envelope_alpha: f64,
    /// `max estimate / V` over the outermost grid radius.
    pub shell_ratio: f64,
    /// Worst-case standard error of `alpha_hat` over the large subset.
    pub alpha_se: f64,
    pub beta_hat: f64,
    pub beta_se: f64,
    pub t_star: f64,
    pub split_radius: f64,
    pub per_point: Vec<DriftPoint>,
    /// `alpha_hat + 3 alpha_se < 1`.
    pub passed: bool,
}

impl DriftFit {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.per_point.first().map_or(0, |p| p.x.len());
        let coords: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        writeln!(w, "{},v,estimate,se,subset", coords.join(","))?;
        for p in &self.per_point {
            let xs: Vec<String> = p.x.iter().map(|v| v.to_string()).collect();
            let subset = match p.subset {
                Subset::Small => "small",
                Subset::Large => "large",
            };
            writeln!(w, "{},{},{},{},{subset}", xs.join(","), p.v, p.estimate, p.se)?;
        }
        Ok(())
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Monte Carlo `(E V(X_t(x)), se)` per grid point; point `i` uses seed
/// `derive_seed(seed, [i])`.
fn expected_v(
    model: &SdeModel,
    lyap: &LyapunovSpec,
    grid: &[Vec<f64>],
    t: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<Vec<(f64, f64, usize)>> {
    grid.iter()
        .enumerate()
        .map(|(i, x)| {
            let b = euler_batch(model, x, t, dt, n_paths, rng::derive_seed(seed, &[i as u64]), true)?;
            let vals: Vec<f64> = b.column(0).iter().map(|p| lyap.eval(p)).collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(ErgoError::Evaluation { what: "lyapunov function".into(), coordinate: 0 });
            }
            let (m, s) = mean_se(&vals);
            Ok((m, s, b.n_diverged()))
        })
        .collect()
}

/// Fit `P_{t*} V ≤ α V + β` by a two-subset envelope. Grid points with
/// `|x|` at most the median form the small subset, which sets
/// `β = max estimate`; the rest give `α = max (estimate − β) / V(x)`,
/// clamped at 0.
///
/// On a bounded grid the envelope alone stays below 1 even without drift,
/// so `alpha_hat` is also at least `estimate / V` on the outermost shell,
/// the grid's proxy for `limsup P_{t*}V / V`.
pub fn drift_fit(
    model: &SdeModel,
    lyap: &LyapunovSpec,
    grid: &[Vec<f64>],
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<DriftFit> {
    if grid.is_empty() {
        return Err(ErgoError::Input("drift grid is empty".into()));
    }
    for x in grid {
        let v = lyap.eval(x);
        if !(v >= 1.0) {
            return Err(ErgoError::Input(format!("V({x:?}) = {v} is below 1")));
        }
    }
    let mut radii: Vec<f64> = grid.iter().map(|x| norm(x)).collect();
    radii.sort_by(f64::total_cmp);
    let split_radius = radii[(radii.len() - 1) / 2];
    if radii.last().is_some_and(|r| *r <= split_radius) {
        return Err(ErgoError::Input("drift grid needs points beyond the median radius".into()));
    }
    let est = expected_v(model, lyap, grid, lyap.t_star, n_paths, dt, seed)?;
    let per_point: Vec<DriftPoint> = grid
        .iter()
        .zip(&est)
        .map(|(x, (m, s, dv))| DriftPoint {
            x: x.clone(),
            v: lyap.eval(x),
            estimate: *m,
            se: *s,
            subset: if norm(x) <= split_radius { Subset::Small } else { Subset::Large },
            diverged: *dv,
        })
        .collect();
    let (beta_hat, beta_se) = per_point
        .iter()
        .filter(|p| p.subset == Subset::Small)
        .map(|p| (p.estimate, p.se))
        .fold((f64::NEG_INFINITY, 0.0), |a, b| if b.0 > a.0 { b } else { a });
    let mut envelope_alpha = 0.0f64;
    let mut alpha_se = 0.0f64;
    for p in per_point.iter().filter(|p| p.subset == Subset::Large) {
        envelope_alpha = envelope_alpha.max((p.estimate - beta_hat) / p.v);
        alpha_se = alpha_se.max((p.se + beta_se) / p.v);
    }
    let r_max = radii[radii.len() - 1];
    let mut shell_ratio = 0.0f64;
    for p in per_point.iter().filter(|p| norm(&p.x) >= r_max * (1.0 - 1e-9)) {
        shell_ratio = shell_ratio.max(p.estimate / p.v);
        alpha_se = alpha_se.max(p.se / p.v);
    }
    let alpha_hat = envelope_alpha.max(shell_ratio);
    Ok(DriftFit {
        alpha_hat,
        envelope_alpha,
        shell_ratio,
        alpha_se,
        beta_hat,
        beta_se,
        t_star: lyap.t_star,
        split_radius,
        passed: alpha_hat + 3.0 * alpha_se < 1.0,
        per_point,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterateRow {
    pub k: usize,
    pub estimate: f64,
    pub se: f64,
    /// `α^k V(x) + β / (1 − α)`.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterateReport {
    pub x: Vec<f64>,
    pub rows: Vec<IterateRow>,
    /// Every estimate is at most its bound plus three standard errors.
    pub passed: bool,
}

/// Compare `E V(X_{k t*}(x))` for `k = 0..=k_steps` with the iterated
/// drift bound from a passing fit.
#[allow(clippy::too_many_arguments)]
pub fn lyapunov_iterate_check(
    fit: &DriftFit,
    model: &SdeModel,
    lyap: &LyapunovSpec,
    x: &[f64],
    k_steps: usize,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<IterateReport> {
    if fit.alpha_hat >= 1.0 {
        return Err(ErgoError::Diagnostic(format!("drift fit has alpha_hat = {} >= 1", fit.alpha_hat)));
    }
    let vx = lyap.eval(x);
    let bound = |k: usize| fit.alpha_hat.powi(k as i32) * vx + fit.beta_hat / (1.0 - fit.alpha_hat);
    let mut rows = vec![IterateRow { k: 0, estimate: vx, se: 0.0, bound: bound(0) }];
    if k_steps > 0 {
        let times: Vec<f64> = (1..=k_steps).map(|k| k as f64 * fit.t_star).collect();
        let b = euler_batch_at(model, x, &times, dt, n_paths, seed)?;
        for k in 1..=k_steps {
            let vals: Vec<f64> = b.column(k - 1).iter().map(|p| lyap.eval(p)).collect();
            let (m, s) = mean_se(&vals);
            rows.push(IterateRow { k, estimate: m, se: s, bound: bound(k) });
        }
    }
    let passed = rows.iter().all(|r| r.estimate <= r.bound + 3.0 * r.se);
    Ok(IterateReport { x: x.to_vec(), rows, passed })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct E1BoundReport {
    pub k: f64,
    pub t_star: f64,
    /// `y^2` coefficient of the closing bound `e^{-kt}|x| + c y^2 + C`.
    pub printed_coeff: f64,
    /// `y^2` coefficient before the final simplification,
    /// `2e^{-2kt} + (2/k) e^{-kt}(1 − e^{-kt})`.
    pub unsimplified_coeff: f64,
    /// Single constant fitted on the drift grid for each form.
    pub c_printed: f64,
    pub c_unsimplified: f64,
    /// Least-squares slope of `estimate − bound` against `y^2` on the grid;
    /// positive means the closing coefficient is too small.
    pub printed_residual_slope: f64,
    pub held_out_points: usize,
    pub printed_held_out_pass: bool,
    pub unsimplified_held_out_pass: bool,
}

/// Check the closed-form drift bound for example-e1 with `V = 1 + |x| + y^2`:
/// fit one constant `C` on `fit`'s grid, then test every point of
/// `held_out` against the bound plus three standard errors.
pub fn e1_bound_check(fit: &DriftFit, held_out: &DriftFit, k: f64) -> Result<E1BoundReport> {
    ensure_range("k", k, k > 0.0, "(0, inf)")?;
    let t = fit.t_star;
    let e1 = (-k * t).exp();
    let printed_coeff = 2.0 * e1 * e1 + 2.0 / k * e1 * e1;
    let unsimplified_coeff = 2.0 * e1 * e1 + 2.0 / k * e1 * (1.0 - e1);
    let g = |p: &DriftPoint, c: f64| e1 * p.x[0].abs() + c * p.x[1] * p.x[1];
    let c_of = |c: f64| fit.per_point.iter().map(|p| p.estimate - g(p, c)).fold(f64::NEG_INFINITY, f64::max);
    let c_printed = c_of(printed_coeff);
    let c_unsimplified = c_of(unsimplified_coeff);
    let ys: Vec<f64> = fit.per_point.iter().map(|p| p.x[1] * p.x[1]).collect();
    let rs: Vec<f64> = fit.per_point.iter().map(|p| p.estimate - g(p, printed_coeff)).collect();
    let slope = weighted_line_fit(&ys, &rs, &vec![1.0; ys.len()]).map(|f| f.slope).unwrap_or(f64::NAN);
    let holds = |c: f64, cc: f64| held_out.per_point.iter().all(|p| p.estimate <= g(p, c) + cc + 3.0 * p.se);
    Ok(E1BoundReport {
        k,
        t_star: t,
        printed_coeff,
        unsimplified_coeff,
        c_printed,
        c_unsimplified,
        printed_residual_slope: slope,
        held_out_points: held_out.per_point.len(),
        printed_held_out_pass: holds(printed_coeff, c_printed),
        unsimplified_held_out_pass: holds(unsimplified_coeff, c_unsimplified),
    })
}

// ---------------------------------------------------------------------------
// total variation

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TvEstimate {
    pub tv: f64,
    /// Bootstrap standard error.
    pub se: f64,
}

fn half_l1(ca: &[u32], na: usize, cb: &[u32], nb: usize) -> f64 {
    // integer arithmetic keeps identical inputs at 0 and disjoint ones at 1
    let (na, nb) = (na as i128, nb as i128);
    let s: i128 = ca.iter().zip(cb).map(|(a, b)| (*a as i128 * nb - *b as i128 * na).abs()).sum();
    s as f64 / (2 * na * nb) as f64
}

/// Half-L1 distance between the two normalized histograms on a shared box,
/// with a bootstrap standard error.
pub fn tv_histogram(a: &[Vec<f64>], b: &[Vec<f64>], spec: &HistogramSpec) -> Result<TvEstimate> {
    if a.len() < MIN_TV_SAMPLES || b.len() < MIN_TV_SAMPLES {
        return Err(ErgoError::SampleSize { got: a.len().min(b.len()), need: MIN_TV_SAMPLES });
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|p| p.len() != d) {
        return Err(ErgoError::Input("sample sets have mixed dimensions".into()));
    }
    if d > MAX_HIST_DIM {
        return Err(ErgoError::Input(format!("histogram dimension {d} exceeds {MAX_HIST_DIM}; project first")));
    }
    if spec.bins == 0 {
        return Err(ErgoError::Input("bins must be positive".into()));
    }
    let binning = spec.binning(&[a, b]);
    let cells_a: Vec<usize> = a.iter().map(|p| binning.cell(p)).collect();
    let cells_b: Vec<usize> = b.iter().map(|p| binning.cell(p)).collect();
    let count = |cells: &[usize]| {
        let mut c = vec![0u32; binning.n_cells()];
        for i in cells {
            c[*i] += 1;
        }
        c
    };
    let tv = half_l1(&count(&cells_a), a.len(), &count(&cells_b), b.len());
    let boots: Vec<f64> = (0..spec.bootstrap as u64)
        .into_par_iter()
        .map(|r| {
            let mut g = rng::stream(spec.seed, &[label::BOOTSTRAP, r]);
            let mut ca = vec![0u32; binning.n_cells()];
            let mut cb = vec![0u32; binning.n_cells()];
            for _ in 0..cells_a.len() {
                ca[cells_a[g.random_range(0..cells_a.len())]] += 1;
            }
            for _ in 0..cells_b.len() {
                cb[cells_b[g.random_range(0..cells_b.len())]] += 1;
            }
            half_l1(&ca, cells_a.len(), &cb, cells_b.len())
        })
        .collect();
    let se = if boots.len() > 1 { crate::stats::variance(&boots).sqrt() } else { 0.0 };
    Ok(TvEstimate { tv, se })
}

/// TV between `N(m1, s^2)` and `N(m2, s^2)`: `2Φ(|m1 − m2| / 2s) − 1`.
pub fn tv_gaussian_exact(m1: f64, m2: f64, s: f64) -> Result<f64> {
    ensure_range("s", s, s > 0.0, "(0, inf)")?;
    let z = (m1 - m2).abs() / (2.0 * s);
    // 1 − 2Φ(−z) keeps precision for small z
    Ok(if z.is_infinite() { 1.0 } else { 1.0 - 2.0 * normal_cdf(-z) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TvMethod {
    /// Exact Gaussian when the projected marginal is a known OU coordinate,
    /// histogram otherwise.
    #[default]
    Auto,
    Histogram,
    ExactGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMethod {
    Histogram,
    ExactGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TvCurve {
    pub times: Vec<f64>,
    pub tv_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub method: CurveMethod,
}

impl TvCurve {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,tv,se")?;
        for i in 0..self.times.len() {
            writeln!(w, "{},{},{}", self.times[i], self.tv_hat[i], self.se[i])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    /// Decay rate of `log tv` in `t`.
    pub theta_hat: f64,
    pub theta_se: f64,
    /// Prefactor: `tv ≈ c_hat e^{-θ t}`.
    pub c_hat: f64,
    pub points_used: usize,
}

/// Weighted least squares of `log tv` on `t` over `tv ∈ [0.02, 0.98]`.
/// Weights are `(tv / se)^2` with the relative error floored at
/// [`REL_SE_FLOOR`]; an exact curve (all `se = 0`) is fitted unweighted.
pub fn fit_decay_rate(curve: &TvCurve) -> Result<RateFit> {
    let idx: Vec<usize> = (0..curve.times.len()).filter(|i| (FIT_LO..=FIT_HI).contains(&curve.tv_hat[*i])).collect();
    if idx.len() < 3 {
        let pts: Vec<(f64, f64)> = curve.times.iter().cloned().zip(curve.tv_hat.iter().cloned()).collect();
        return Err(ErgoError::FitWindow { usable: idx.len(), curve: format!("{pts:?}") });
    }
    let x: Vec<f64> = idx.iter().map(|i| curve.times[*i]).collect();
    let y: Vec<f64> = idx.iter().map(|i| curve.tv_hat[*i].ln()).collect();
    let exact = idx.iter().all(|i| curve.se[*i] == 0.0);
    let w: Vec<f64> = idx
        .iter()
        .map(|i| {
            if exact {
                1.0
            } else {
                let tv = curve.tv_hat[*i];
                let se = curve.se[*i].max(REL_SE_FLOOR * tv);
                (tv / se).powi(2)
            }
        })
        .collect();
    let f = weighted_line_fit(&x, &y, &w)?;
    Ok(RateFit { theta_hat: -f.slope, theta_se: f.slope_se, c_hat: f.intercept.exp(), points_used: idx.len() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvDecayParams {
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub dt: f64,
    pub hist: HistogramSpec,
    pub projection: Option<Vec<usize>>,
    pub method: TvMethod,
}

fn project(p: &[f64], proj: &[usize]) -> Vec<f64> {
    proj.iter().map(|i| p[*i]).collect()
}

/// TV curve between the laws started at `x0` and `y0`, without fitting.
/// The two histogram ensembles use independent noise.
pub fn tv_curve(model: &SdeModel, x0: &[f64], y0: &[f64], params: &TvDecayParams, seed: u64) -> Result<TvCurve> {
    let times = &params.times;
    if times.len() < 3 || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ErgoError::Input("times must be increasing with at least 3 entries".into()));
    }
    let d = model.dim();
    let proj: Vec<usize> = params.projection.clone().unwrap_or_else(|| (0..d).collect());
    if proj.is_empty() || proj.iter().any(|i| *i >= d) {
        return Err(ErgoError::Config(format!("projection {proj:?} is out of range for dimension {d}")));
    }
    let ou = if proj.len() == 1 { model.ou_marginals.get(proj[0]).copied().flatten() } else { None };
    let use_exact = match params.method {
        TvMethod::ExactGaussian => {
            if ou.is_none() {
                return Err(ErgoError::Config("exact-gaussian TV needs a projection onto one OU coordinate".into()));
            }
            true
        }
        TvMethod::Auto => ou.is_some(),
        TvMethod::Histogram => false,
    };
    if use_exact {
        let ou = ou.unwrap();
        let c = proj[0];
        let mut tv = Vec::new();
        for t in times {
            let (m1, var) = ou_moments(ou.k, ou.sigma, x0[c], *t)?;
            let (m2, _) = ou_moments(ou.k, ou.sigma, y0[c], *t)?;
            tv.push(tv_gaussian_exact(m1, m2, var.sqrt())?);
        }
        return Ok(TvCurve {
            times: times.clone(),
            se: vec![0.0; tv.len()],
            tv_hat: tv,
            method: CurveMethod::ExactGaussian,
        });
    }
    let bx = euler_batch_at(model, x0, times, params.dt, params.n_paths, seed)?;
    let by =
        euler_batch_at(model, y0, times, params.dt, params.n_paths, rng::derive_seed(seed, &[label::ENSEMBLE_RIGHT]))?;
    let mut tv_hat = Vec::new();
    let mut se = Vec::new();
    for g in 0..times.len() {
        let a: Vec<Vec<f64>> = bx.column(g).iter().map(|p| project(p, &proj)).collect();
        let b: Vec<Vec<f64>> = by.column(g).iter().map(|p| project(p, &proj)).collect();
        let spec = HistogramSpec { seed: rng::derive_seed(params.hist.seed, &[g as u64]), ..params.hist.clone() };
        let e = tv_histogram(&a, &b, &spec)?;
        tv_hat.push(e.tv);
        se.push(e.se);
    }
    Ok(TvCurve { times: times.clone(), tv_hat, se, method: CurveMethod::Histogram })
}

/// [`tv_curve`] followed by [`fit_decay_rate`].
pub fn tv_curve_and_fit(
    model: &SdeModel,
    x0: &[f64],
    y0: &[f64],
    params: &TvDecayParams,
    seed: u64,
) -> Result<(TvCurve, RateFit)> {
    let curve = tv_curve(model, x0, y0, params, seed)?;
    let fit = fit_decay_rate(&curve)?;
    Ok((curve, fit))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantReport {
    pub starts: Vec<Vec<f64>>,
    pub t_burn: f64,
    /// Symmetric matrix of pairwise TV estimates.
    pub tv: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    /// Every pair has `tv ≤ 0.05 + se`.
    pub passed: bool,
}

/// Pairwise TV between terminal laws at `t_burn` from several starts. All
/// starts share `seed`, so equal starts give identical samples.
#[allow(clippy::too_many_arguments)]
pub fn invariant_agreement(
    model: &SdeModel,
    starts: &[Vec<f64>],
    t_burn: f64,
    n_samples: usize,
    dt: f64,
    hist: &HistogramSpec,
    projection: Option<&[usize]>,
    seed: u64,
) -> Result<InvariantReport> {
    if starts.len() < 2 {
        return Err(ErgoError::Input("invariant check needs at least two starts".into()));
    }
    let d = model.dim();
    let proj: Vec<usize> = projection.map_or_else(|| (0..d).collect(), |p| p.to_vec());
    let samples: Vec<Vec<Vec<f64>>> = starts
        .iter()
        .map(|x0| {
            let b = euler_batch(model, x0, t_burn, dt, n_samples, seed, true)?;
            Ok(b.column(0).iter().map(|p| project(p, &proj)).collect())
        })
        .collect::<Result<_>>()?;
    let n = starts.len();
    let mut tv = vec![vec![0.0; n]; n];
    let mut se = vec![vec![0.0; n]; n];
    let mut passed = true;
    for i in 0..n {
        for j in i + 1..n {
            let e = tv_histogram(&samples[i], &samples[j], hist)?;
            tv[i][j] = e.tv;
            tv[j][i] = e.tv;
            se[i][j] = e.se;
            se[j][i] = e.se;
            passed &= e.tv <= 0.05 + e.se;
        }
    }
    Ok(InvariantReport { starts: starts.to_vec(), t_burn, tv, se, passed })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub delta: f64,
    pub tv: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct H2Probe {
    pub rows: Vec<ProbeRow>,
    /// TV between two independent ensembles from the same start.
    pub floor: TvEstimate,
    /// Non-increasing up to `2 se` and the smallest `delta` within
    /// `floor + 3 se` of the floor.
    pub reaches_floor: bool,
}

/// TV at time `t` between starts `x` and `x + δ e_1` for decreasing `δ`,
/// against the noise floor of two independent ensembles from `x`.
#[allow(clippy::too_many_arguments)]
pub fn h2_probe(
    model: &SdeModel,
    x: &[f64],
    deltas: &[f64],
    t: f64,
    n_paths: usize,
    dt: f64,
    hist: &HistogramSpec,
    seed: u64,
) -> Result<H2Probe> {
    let base = euler_batch(model, x, t, dt, n_paths, seed, true)?.column(0);
    let other = |x1: &[f64], k: u64| -> Result<Vec<Vec<f64>>> {
        Ok(euler_batch(model, x1, t, dt, n_paths, rng::derive_seed(seed, &[label::PROBE, k]), true)?.column(0))
    };
    let floor = tv_histogram(&base, &other(x, 0)?, hist)?;
    let mut rows = Vec::new();
    for (i, delta) in deltas.iter().enumerate() {
        let mut x1 = x.to_vec();
        x1[0] += delta;
        let e = tv_histogram(&base, &other(&x1, i as u64 + 1)?, hist)?;
        rows.push(ProbeRow { delta: *delta, tv: e.tv, se: e.se });
    }
    let monotone = rows.windows(2).all(|w| w[1].tv <= w[0].tv + 2.0 * (w[0].se + w[1].se));
    let reaches_floor = monotone && rows.last().is_some_and(|r| r.tv <= floor.tv + 3.0 * (r.se + floor.se));
    Ok(H2Probe { rows, floor, reaches_floor })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use nalgebra::DMatrix;
    use rand_distr::StandardNormal;

    fn normals(n: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut r: StreamRng = rng::stream(seed, &[]);
        (0..n).map(|_| vec![shift + r.sample::<f64, _>(StandardNormal)]).collect()
    }

    #[test]
    fn tv_identical_and_disjoint() {
        let a = normals(500, 0.0, 1);
        let spec = HistogramSpec::default();
        assert_eq!(tv_histogram(&a, &a, &spec).unwrap().tv, 0.0);
        let b: Vec<Vec<f64>> = a.iter().map(|p| vec![p[0] + 100.0]).collect();
        assert_eq!(tv_histogram(&a, &b, &spec).unwrap().tv, 1.0);
    }

    #[test]
    fn tv_needs_samples_and_low_dimension() {
        let a = normals(50, 0.0, 1);
        let spec = HistogramSpec::default();
        assert!(matches!(tv_histogram(&a, &a, &spec), Err(ErgoError::SampleSize { got: 50, need: 100 })));
        let hi = vec![vec![0.0; 4]; 200];
        assert!(tv_histogram(&hi, &hi, &spec).is_err());
    }

    #[test]
    fn gaussian_tv_values() {
        assert_eq!(tv_gaussian_exact(1.0, 1.0, 2.0).unwrap(), 0.0);
        assert!((tv_gaussian_exact(0.0, 1.0, 1.0).unwrap() - 0.382_924_922_548_026).abs() < 1e-9);
        assert!(tv_gaussian_exact(0.0, 1e9, 1.0).unwrap() > 1.0 - 1e-12);
        assert!(tv_gaussian_exact(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn fit_refuses_flat_curve() {
        let c = TvCurve {
            times: vec![1.0, 2.0, 3.0],
            tv_hat: vec![0.0, 0.01, 0.0],
            se: vec![0.0; 3],
            method: CurveMethod::Histogram,
        };
        assert!(matches!(fit_decay_rate(&c), Err(ErgoError::FitWindow { usable: 0, .. })));
    }

    #[test]
    fn fit_recovers_exact_exponential() {
        let times: Vec<f64> = (1..=8).map(f64::from).collect();
        let tv: Vec<f64> = times.iter().map(|t| 0.7 * (-0.4 * t).exp()).collect();
        let c = TvCurve { times, tv_hat: tv, se: vec![0.0; 8], method: CurveMethod::ExactGaussian };
        let f = fit_decay_rate(&c).unwrap();
        assert!((f.theta_hat - 0.4).abs() < 1e-12 && (f.c_hat - 0.7).abs() < 1e-12);
    }

    #[test]
    fn ou_drift_fit_alpha() {
        // E V(X_1) = 1 + e^{-2}|x|^2 + (1 - e^{-2})/2 for b = -x, σ = 1
        let m = SdeModel::linear(DMatrix::from_element(1, 1, -1.0), DMatrix::identity(1, 1)).unwrap();
        let grid: Vec<Vec<f64>> =
            [0.0, 1.0, 2.0, 3.0, 4.0, 50.0, 100.0, 150.0, 200.0].iter().map(|x| vec![*x]).collect();
        let fit = drift_fit(&m, &LyapunovSpec::quadratic(1.0), &grid, 4000, 1e-3, 2).unwrap();
        assert!(fit.passed);
        let p = fit.per_point.last().unwrap();
        let exact = 1.0 + (-2.0f64).exp() * 40000.0 + (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((p.estimate - exact).abs() < 0.01 * exact, "{} vs {exact}", p.estimate);
        assert!((fit.alpha_hat - (-2.0f64).exp()).abs() < 0.01, "{}", fit.alpha_hat);
    }

    #[test]
    fn brownian_drift_fit_fails() {
        use crate::model::{DriftField, VectorMap};
        use std::sync::Arc;
        let zero: VectorMap = Arc::new(|_: &[f64], out: &mut [f64]| out[0] = 0.0);
        let m = SdeModel::new("bm", DriftField::new(1, zero), DMatrix::identity(1, 1), DMatrix::zeros(1, 1)).unwrap();
        let grid: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 3.0]).collect();
        let fit = drift_fit(&m, &LyapunovSpec::quadratic(1.0), &grid, 2000, 0.01, 0).unwrap();
        assert!(!fit.passed && fit.alpha_hat >= 0.9);
    }

    #[test]
    fn iterate_zeroth_row_is_trivial() {
        let m = SdeModel::linear(DMatrix::from_element(1, 1, -1.0), DMatrix::identity(1, 1)).unwrap();
        let grid: Vec<Vec<f64>> = (0..=4).map(|i| vec![i as f64 * 2.0]).collect();
        let lyap = LyapunovSpec::quadratic(1.0);
        let fit = drift_fit(&m, &lyap, &grid, 2000, 0.01, 0).unwrap();
        let r = lyapunov_iterate_check(&fit, &m, &lyap, &[3.0], 0, 10, 0.01, 0).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert!(r.rows[0].bound >= r.rows[0].estimate && r.passed);
    }

    #[test]
    fn invariant_identical_starts_agree_exactly() {
        let m = SdeModel::example_e1(1.0, 1.0).unwrap();
        let r = invariant_agreement(
            &m,
            &[vec![1.0, 1.0], vec![1.0, 1.0]],
            1.0,
            200,
            0.01,
            &HistogramSpec::default(),
            None,
            3,
        )
        .unwrap();
        assert_eq!(r.tv[0][1], 0.0);
        assert!(r.passed);
    }
}
