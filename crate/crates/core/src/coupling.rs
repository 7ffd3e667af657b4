//! Couplings: synchronous (shared-noise) pairs, the γ-maximal coupling of
//! two explicit laws, the coupled chain on `R^d × R^d` and coupling-time
//! tail fits.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ensure_range, ErgoError, Result};
use crate::integrate::{euler_batch, step_count, EulerEngine, PathBatch};
use crate::model::SdeModel;
use crate::rng::{self, label, StreamRng};
use crate::stats::{mean_se, weighted_line_fit, Binning};

// ---------------------------------------------------------------------------
// synchronous pairs

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    pub k: f64,
    pub dt: f64,
    /// `max |Δ_t|^2 e^{kt} / |Δ_0|^2` over paths and grid times; `None` when
    /// the two starts coincide.
    pub statistic: Option<f64>,
    /// Same statistic normalized by `e^{2kt}`, the rate the differential
    /// inequality actually gives.
    pub sharp_statistic: Option<f64>,
    pub diverged_pairs: usize,
    pub passed: bool,
    pub warning: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PairedBatch {
    pub x: PathBatch,
    pub y: PathBatch,
    pub report: ContractionReport,
}

/// Two Euler ensembles from `x0` and `y0` driven by identical Brownian and
/// jump realizations. Passes when the statistic is at most `1 + 10 dt`.
pub fn synchronous_pair_batch(
    model: &SdeModel,
    x0: &[f64],
    y0: &[f64],
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<PairedBatch> {
    let k = model
        .dissipativity_k
        .ok_or_else(|| ErgoError::Config(format!("model '{}' declares no dissipativity_k", model.name)))?;
    let x = euler_batch(model, x0, horizon, dt, n_paths, seed, false)?;
    let y = euler_batch(model, y0, horizon, dt, n_paths, seed, false)?;
    let d0: f64 = x0.iter().zip(y0).map(|(a, b)| (a - b) * (a - b)).sum();
    let mut diverged_pairs = 0;
    let (statistic, sharp, warning) = if d0 == 0.0 {
        (None, None, Some("x0 = y0: contraction ratio undefined".to_string()))
    } else {
        let mut worst = f64::NEG_INFINITY;
        let mut worst_sharp = f64::NEG_INFINITY;
        for p in 0..n_paths {
            if x.diverged[p] || y.diverged[p] {
                diverged_pairs += 1;
                continue;
            }
            for (g, t) in x.t_grid.iter().enumerate() {
                let dd: f64 = x.state(p, g).iter().zip(y.state(p, g)).map(|(a, b)| (a - b) * (a - b)).sum();
                worst = worst.max(dd * (k * t).exp() / d0);
                worst_sharp = worst_sharp.max(dd * (2.0 * k * t).exp() / d0);
            }
        }
        (Some(worst), Some(worst_sharp), None)
    };
    let passed = statistic.is_none_or(|s| s <= 1.0 + 10.0 * dt);
    Ok(PairedBatch {
        report: ContractionReport { k, dt, statistic, sharp_statistic: sharp, diverged_pairs, passed, warning },
        x,
        y,
    })
}

// ---------------------------------------------------------------------------
// maximal coupling of explicit laws

/// A law on `R^m` with an evaluable density and a sampler.
pub trait Distribution: Send + Sync {
    fn density(&self, z: &[f64]) -> f64;
    fn sample(&self, rng: &mut StreamRng) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mean: f64,
    pub sd: f64,
}

impl Distribution for Gaussian {
    fn density(&self, z: &[f64]) -> f64 {
        let u = (z[0] - self.mean) / self.sd;
        (-0.5 * u * u).exp() / (self.sd * (2.0 * std::f64::consts::PI).sqrt())
    }
    fn sample(&self, rng: &mut StreamRng) -> Vec<f64> {
        vec![self.mean + self.sd * rng.sample::<f64, _>(StandardNormal)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Uniform {
    pub lo: f64,
    pub hi: f64,
}

impl Distribution for Uniform {
    fn density(&self, z: &[f64]) -> f64 {
        if z[0] >= self.lo && z[0] <= self.hi {
            1.0 / (self.hi - self.lo)
        } else {
            0.0
        }
    }
    fn sample(&self, rng: &mut StreamRng) -> Vec<f64> {
        vec![self.lo + (self.hi - self.lo) * rng.random::<f64>()]
    }
}

/// Finite mixture of 1-d Gaussians; weights need not be normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub components: Vec<Gaussian>,
}

impl Distribution for GaussianMixture {
    fn density(&self, z: &[f64]) -> f64 {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().zip(&self.components).map(|(w, c)| w * c.density(z)).sum::<f64>() / total
    }
    fn sample(&self, rng: &mut StreamRng) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (w, c) in self.weights.iter().zip(&self.components) {
            if u < *w {
                return c.sample(rng);
            }
            u -= w;
        }
        self.components.last().expect("empty mixture").sample(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledDraw {
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub coupled: bool,
}

pub const MAX_RESIDUAL_PROPOSALS: usize = 1_000_000;

fn gamma_coupling(p: &dyn Distribution, q: &dyn Distribution, rng: &mut StreamRng) -> Result<CoupledDraw> {
    let z1 = p.sample(rng);
    let (p1, q1) = (p.density(&z1), q.density(&z1));
    if rng.random::<f64>() * p1 <= q1 {
        return Ok(CoupledDraw { z2: z1.clone(), z1, coupled: true });
    }
    for _ in 0..MAX_RESIDUAL_PROPOSALS {
        let z2 = q.sample(rng);
        let (pz, qz) = (p.density(&z2), q.density(&z2));
        if rng.random::<f64>() * qz > pz {
            return Ok(CoupledDraw { z1, z2, coupled: false });
        }
    }
    Err(ErgoError::Numeric(format!(
        "residual rejection exceeded {MAX_RESIDUAL_PROPOSALS} proposals; the laws are nearly identical"
    )))
}

/// One γ-coupling draw: `z1 ~ p`, and `z2 = z1` with probability
/// `min(1, q(z1)/p(z1))`, otherwise `z2` from the normalized residual
/// `(q - p)^+`.
pub fn maximal_coupling_sample(p: &dyn Distribution, q: &dyn Distribution, seed: u64) -> Result<CoupledDraw> {
    gamma_coupling(p, q, &mut rng::stream(seed, &[label::COUPLING]))
}

/// `n` independent draws; draw `i` uses stream `(seed, COUPLING, i)`.
pub fn maximal_coupling_batch(
    p: &dyn Distribution,
    q: &dyn Distribution,
    n: usize,
    seed: u64,
) -> Result<Vec<CoupledDraw>> {
    (0..n as u64).into_par_iter().map(|i| gamma_coupling(p, q, &mut rng::stream(seed, &[label::COUPLING, i]))).collect()
}

/// Maximal coupling of two distributions on `{0..n}` given by nonnegative
/// weights. Returns `(i, j)` with `i ~ p`, `j ~ q` and `P(i = j) = Σ min`.
pub fn discrete_maximal_coupling(p: &[f64], q: &[f64], rng: &mut StreamRng) -> (usize, usize) {
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    let i = pick(p, sp, rng);
    if rng.random::<f64>() * p[i] / sp <= q[i] / sq {
        return (i, i);
    }
    let resid: Vec<f64> = p.iter().zip(q).map(|(a, b)| (b / sq - a / sp).max(0.0)).collect();
    let sr: f64 = resid.iter().sum();
    (i, pick(&resid, sr, rng))
}

fn pick(w: &[f64], total: f64, rng: &mut StreamRng) -> usize {
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, wi) in w.iter().enumerate() {
        if *wi > 0.0 {
            if u < *wi {
                return i;
            }
            u -= wi;
            last = i;
        }
    }
    last
}

// ---------------------------------------------------------------------------
// coupled chain

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoupledState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub coupled: bool,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainParams {
    pub t_chain: f64,
    pub r_star: f64,
    pub delta: f64,
    pub max_steps: usize,
    pub n_trials: usize,
    pub dt: f64,
    pub n_kernel: usize,
    pub bins: usize,
}

impl ChainParams {
    /// Defaults around a chain step `t_chain` (use `3/k` when unsure).
    pub fn new(t_chain: f64, r_star: f64, delta: f64) -> Self {
        ChainParams { t_chain, r_star, delta, max_steps: 50, n_trials: 200, dt: 0.01, n_kernel: 2000, bins: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingRun {
    pub trials: usize,
    /// Chain steps to coupling; censored trials hold the cap.
    pub tau_samples: Vec<usize>,
    pub censored: Vec<bool>,
    pub cap: usize,
    /// Model time of the first chain step with both states in the ball.
    pub tau1_samples: Vec<Option<f64>>,
    pub r_star: f64,
    pub t_chain: f64,
    pub p_hat: f64,
    pub merge_attempts: usize,
    pub merge_failures: usize,
    pub diverged: usize,
    /// Widest bin edge seen in any merge attempt.
    pub bin_resolution: f64,
    #[serde(skip)]
    pub trajectories: Vec<Vec<CoupledState>>,
}

impl CouplingRun {
    pub fn censored_fraction(&self) -> f64 {
        self.censored.iter().filter(|c| **c).count() as f64 / self.trials.max(1) as f64
    }

    pub fn coupled_fraction(&self) -> f64 {
        1.0 - self.censored_fraction()
    }

    /// CSV with `trial,tau_chain_steps,tau1_time,censored`; `tau1_time` is
    /// empty when the pair never entered the ball.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "trial,tau_chain_steps,tau1_time,censored")?;
        for i in 0..self.trials {
            let t1 = self.tau1_samples[i].map_or(String::new(), |t| t.to_string());
            writeln!(w, "{i},{},{t1},{}", self.tau_samples[i], self.censored[i])?;
        }
        Ok(())
    }
}

struct TrialOutcome {
    tau: Option<usize>,
    tau1: Option<f64>,
    attempts: usize,
    failures: usize,
    diverged: bool,
    bin_width: f64,
    states: Vec<CoupledState>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn in_ball(a: &[f64], r: f64) -> bool {
    a.iter().map(|x| x * x).sum::<f64>().sqrt() <= r
}

/// Evolve `x` one chain step with noise from `(seed, keys..)`.
fn chain_step(engine: &EulerEngine<'_>, x: &mut [f64], n_steps: usize, seed: u64, keys: &[u64]) -> Result<bool> {
    let mut normals = rng::stream(seed, &[keys, &[0]].concat());
    let mut jr = rng::stream(seed, &[keys, &[1]].concat());
    let jumps = engine.sample_jumps(n_steps as f64 * engine.dt, &mut jr)?;
    Ok(engine.advance(x, n_steps, &mut normals, &jumps, |_, _| {}))
}

enum Merge {
    Coupled(Vec<f64>),
    Apart(Vec<f64>, Vec<f64>),
    Diverged,
}

/// Binned maximal-coupling step from `(u, v)`. Both kernels are estimated
/// from `n_kernel` auxiliary paths with common random numbers.
#[allow(clippy::too_many_arguments)]
fn merge_step(
    engine: &EulerEngine<'_>,
    u: &[f64],
    v: &[f64],
    n_steps: usize,
    params: &ChainParams,
    seed: u64,
    trial: u64,
    step: u64,
    bin_width: &mut f64,
) -> Result<Merge> {
    let aux = |start: &[f64]| -> Result<Vec<Option<Vec<f64>>>> {
        (0..params.n_kernel as u64)
            .into_par_iter()
            .map(|j| {
                let mut x = start.to_vec();
                let ok = chain_step(engine, &mut x, n_steps, seed, &[label::CHAIN_AUX, trial, step, j])?;
                Ok(ok.then_some(x))
            })
            .collect()
    };
    let su: Vec<Vec<f64>> = aux(u)?.into_iter().flatten().collect();
    let sv: Vec<Vec<f64>> = aux(v)?.into_iter().flatten().collect();
    if su.is_empty() || sv.is_empty() {
        return Ok(Merge::Diverged);
    }
    let binning = Binning::covering(&[&su, &sv], params.bins);
    for c in 0..binning.dim() {
        *bin_width = bin_width.max((binning.hi[c] - binning.lo[c]) / params.bins as f64);
    }
    let mut members_u: Vec<Vec<u32>> = vec![Vec::new(); binning.n_cells()];
    let mut members_v: Vec<Vec<u32>> = vec![Vec::new(); binning.n_cells()];
    for (i, p) in su.iter().enumerate() {
        members_u[binning.cell(p)].push(i as u32);
    }
    for (i, p) in sv.iter().enumerate() {
        members_v[binning.cell(p)].push(i as u32);
    }
    let pu: Vec<f64> = members_u.iter().map(|m| m.len() as f64).collect();
    let pv: Vec<f64> = members_v.iter().map(|m| m.len() as f64).collect();
    let mut r = rng::stream(seed, &[label::CHAIN_MERGE, trial, step]);
    let (i, j) = discrete_maximal_coupling(&pu, &pv, &mut r);
    let a = &members_u[i];
    let nu = su[a[r.random_range(0..a.len())] as usize].clone();
    if i == j {
        return Ok(Merge::Coupled(nu));
    }
    let b = &members_v[j];
    let nv = sv[b[r.random_range(0..b.len())] as usize].clone();
    Ok(Merge::Apart(nu, nv))
}

fn run_trial(
    engine: &EulerEngine<'_>,
    x0: &[f64],
    y0: &[f64],
    params: &ChainParams,
    n_steps: usize,
    seed: u64,
    trial: u64,
) -> Result<TrialOutcome> {
    let mut u = x0.to_vec();
    let mut v = y0.to_vec();
    let mut out = TrialOutcome {
        tau: None,
        tau1: None,
        attempts: 0,
        failures: 0,
        diverged: false,
        bin_width: 0.0,
        states: vec![CoupledState { u: u.clone(), v: v.clone(), coupled: u == v, step: 0 }],
    };
    if u == v {
        out.tau = Some(0);
        return Ok(out);
    }
    for m in 0..params.max_steps {
        let close = in_ball(&u, params.r_star) && in_ball(&v, params.r_star) && dist(&u, &v) <= params.delta;
        let mut coupled = false;
        if close {
            out.attempts += 1;
            match merge_step(engine, &u, &v, n_steps, params, seed, trial, m as u64, &mut out.bin_width)? {
                Merge::Coupled(z) => {
                    u = z.clone();
                    v = z;
                    coupled = true;
                }
                Merge::Apart(a, b) => {
                    out.failures += 1;
                    u = a;
                    v = b;
                }
                Merge::Diverged => {
                    out.diverged = true;
                    return Ok(out);
                }
            }
        } else {
            let keys = [label::CHAIN_SYNC, trial, m as u64];
            let ok_u = chain_step(engine, &mut u, n_steps, seed, &keys)?;
            let ok_v = chain_step(engine, &mut v, n_steps, seed, &keys)?;
            if !(ok_u && ok_v) {
                out.diverged = true;
                return Ok(out);
            }
        }
        let step = m + 1;
        out.states.push(CoupledState { u: u.clone(), v: v.clone(), coupled, step });
        if out.tau1.is_none() && in_ball(&u, params.r_star) && in_ball(&v, params.r_star) {
            out.tau1 = Some(step as f64 * params.t_chain);
        }
        if coupled {
            out.tau = Some(step);
            return Ok(out);
        }
    }
    Ok(out)
}

/// Run `n_trials` independent coupled chains from `(x0, y0)`.
///
/// Each chain step either advances both states synchronously or, when both
/// lie in the ball of radius `r_star` within `delta` of each other,
/// attempts a binned maximal-coupling merge. Coupled trials stop.
pub fn coupled_chain_run(
    model: &SdeModel,
    x0: &[f64],
    y0: &[f64],
    params: &ChainParams,
    seed: u64,
) -> Result<CouplingRun> {
    ensure_range("t_chain", params.t_chain, params.t_chain > 0.0, "(0, inf)")?;
    ensure_range("r_star", params.r_star, params.r_star > 0.0, "(0, inf)")?;
    ensure_range("delta", params.delta, params.delta > 0.0, "(0, inf)")?;
    if params.n_trials == 0 || params.max_steps == 0 || params.n_kernel == 0 || params.bins == 0 {
        return Err(ErgoError::Input("n_trials, max_steps, n_kernel and bins must be positive".into()));
    }
    if x0.len() != model.dim() || y0.len() != model.dim() {
        return Err(ErgoError::Config("start points do not match the model dimension".into()));
    }
    let n_steps = step_count(params.t_chain, params.dt)?;
    let engine = EulerEngine::new(model, params.dt)?;
    let outcomes: Vec<TrialOutcome> = (0..params.n_trials as u64)
        .into_par_iter()
        .map(|t| run_trial(&engine, x0, y0, params, n_steps, seed, t))
        .collect::<Result<_>>()?;
    let attempts: usize = outcomes.iter().map(|o| o.attempts).sum();
    let failures: usize = outcomes.iter().map(|o| o.failures).sum();
    let any_coupled = outcomes.iter().any(|o| o.tau.is_some());
    if !any_coupled {
        return Err(ErgoError::Diagnostic(format!(
            "no trial coupled ({attempts} merge attempts); try a larger t_chain, larger delta or coarser bins"
        )));
    }
    let cap = params.max_steps;
    Ok(CouplingRun {
        trials: params.n_trials,
        tau_samples: outcomes.iter().map(|o| o.tau.unwrap_or(cap)).collect(),
        censored: outcomes.iter().map(|o| o.tau.is_none()).collect(),
        cap,
        tau1_samples: outcomes.iter().map(|o| o.tau1).collect(),
        r_star: params.r_star,
        t_chain: params.t_chain,
        p_hat: if attempts > 0 { failures as f64 / attempts as f64 } else { 0.0 },
        merge_attempts: attempts,
        merge_failures: failures,
        diverged: outcomes.iter().filter(|o| o.diverged).count(),
        bin_resolution: outcomes.iter().map(|o| o.bin_width).fold(0.0, f64::max),
        trajectories: outcomes.into_iter().map(|o| o.states).collect(),
    })
}

/// Coupled chain on a finite state space with transition matrix `p`,
/// merging by the discrete maximal coupling of the two current rows.
pub fn finite_chain_coupling_run(
    p: &DMatrix<f64>,
    x0: usize,
    y0: usize,
    max_steps: usize,
    n_trials: usize,
    seed: u64,
) -> Result<CouplingRun> {
    let n = p.nrows();
    if p.ncols() != n || x0 >= n || y0 >= n {
        return Err(ErgoError::Input("transition matrix must be square and contain both starts".into()));
    }
    for i in 0..n {
        let s: f64 = p.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-9 || p.row(i).iter().any(|v| *v < 0.0) {
            return Err(ErgoError::Input(format!("row {i} is not a probability vector")));
        }
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| p.row(i).iter().cloned().collect()).collect();
    let outcomes: Vec<(Option<usize>, Vec<CoupledState>)> = (0..n_trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(seed, &[label::CHAIN_MERGE, t]);
            let (mut u, mut v) = (x0, y0);
            let mut states = vec![CoupledState { u: vec![u as f64], v: vec![v as f64], coupled: u == v, step: 0 }];
            if u == v {
                return (Some(0), states);
            }
            for m in 1..=max_steps {
                let (a, b) = discrete_maximal_coupling(&rows[u], &rows[v], &mut r);
                u = a;
                v = b;
                states.push(CoupledState { u: vec![u as f64], v: vec![v as f64], coupled: u == v, step: m });
                if u == v {
                    return (Some(m), states);
                }
            }
            (None, states)
        })
        .collect();
    let attempts: usize = outcomes.iter().map(|o| o.1.len() - 1).sum();
    let coupled = outcomes.iter().filter(|o| o.0.is_some_and(|t| t > 0)).count();
    Ok(CouplingRun {
        trials: n_trials,
        tau_samples: outcomes.iter().map(|o| o.0.unwrap_or(max_steps)).collect(),
        censored: outcomes.iter().map(|o| o.0.is_none()).collect(),
        cap: max_steps,
        tau1_samples: vec![Some(0.0); n_trials],
        r_star: f64::INFINITY,
        t_chain: 1.0,
        p_hat: if attempts > 0 { (attempts - coupled) as f64 / attempts as f64 } else { 0.0 },
        merge_attempts: attempts,
        merge_failures: attempts - coupled,
        diverged: 0,
        bin_resolution: 0.0,
        trajectories: outcomes.into_iter().map(|o| o.1).collect(),
    })
}

// ---------------------------------------------------------------------------
// tail fit

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpMoment {
    pub theta: f64,
    /// Mean of `e^{θτ}` over all trials, censored ones at the cap.
    pub estimate: f64,
    pub se: f64,
    /// `θ < |slope|`.
    pub finite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailFit {
    pub slope: f64,
    pub slope_se: f64,
    pub p_fit: f64,
    /// 95% interval for the slope.
    pub slope_ci: (f64, f64),
    pub fit_range: (usize, usize),
    /// `(n, P(τ > n), se of log P(τ > n))` over the fit range.
    pub survival: Vec<(usize, f64, f64)>,
    pub exp_moment: ExpMoment,
    pub censored_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TailVerdict {
    /// All uncensored coupling times are equal; no slope to fit.
    PointMass {
        tau: usize,
    },
    Geometric(TailFit),
}

/// Minimum number of uncensored samples for a tail fit.
pub const MIN_UNCENSORED: usize = 50;

/// Fit `log P(τ > n) ≈ a + n·slope` by weighted least squares over
/// `n ∈ [τ_min − 1, last n with at least 5 survivors]` (any survivor when
/// that leaves a single point), with weights equal to the inverse binomial
/// variance of `log P̂`. `theta` defaults to
/// `|slope| / 2`.
pub fn coupling_time_tail(run: &CouplingRun, theta: Option<f64>) -> Result<TailVerdict> {
    let total = run.tau_samples.len();
    let censored_fraction = run.censored_fraction();
    if censored_fraction > 0.5 {
        return Err(ErgoError::Censored { fraction: censored_fraction });
    }
    let unc: Vec<usize> = run.tau_samples.iter().zip(&run.censored).filter(|(_, c)| !**c).map(|(t, _)| *t).collect();
    if unc.len() < MIN_UNCENSORED {
        return Err(ErgoError::SampleSize { got: unc.len(), need: MIN_UNCENSORED });
    }
    let tmin = *unc.iter().min().unwrap();
    let tmax = *unc.iter().max().unwrap();
    if tmin == tmax && censored_fraction == 0.0 {
        return Ok(TailVerdict::PointMass { tau: tmin });
    }
    let n_total = total as f64;
    let survivors = |n: usize| run.tau_samples.iter().filter(|t| **t > n).count();
    let start = tmin.saturating_sub(1);
    let window = |min_survivors: usize| {
        let (mut xs, mut ys, mut ws, mut survival) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut n = start;
        while n < run.cap {
            let s = survivors(n);
            if s < min_survivors {
                break;
            }
            let sf = s as f64 / n_total;
            let var = (1.0 - sf).max(1.0 / n_total) / (n_total * sf);
            xs.push(n as f64);
            ys.push(sf.ln());
            ws.push(1.0 / var);
            survival.push((n, sf, var.sqrt()));
            n += 1;
        }
        (xs, ys, ws, survival)
    };
    // a tail that empties within a step or two keeps every nonempty point
    let (mut xs, mut ys, mut ws, mut survival) = window(5);
    if xs.len() < 2 {
        (xs, ys, ws, survival) = window(1);
    }
    if xs.len() < 2 {
        return Err(ErgoError::FitWindow {
            usable: xs.len(),
            curve: format!("{:?}", survival.iter().map(|(n, s, _)| (*n, *s)).collect::<Vec<_>>()),
        });
    }
    let fit = weighted_line_fit(&xs, &ys, &ws)?;
    let theta = theta.unwrap_or(fit.slope.abs() / 2.0);
    let moments: Vec<f64> = run.tau_samples.iter().map(|t| (theta * *t as f64).exp()).collect();
    let (estimate, se) = mean_se(&moments);
    Ok(TailVerdict::Geometric(TailFit {
        slope: fit.slope,
        slope_se: fit.slope_se,
        p_fit: fit.slope.exp(),
        slope_ci: (fit.slope - 1.96 * fit.slope_se, fit.slope + 1.96 * fit.slope_se),
        fit_range: (start, start + xs.len() - 1),
        survival,
        exp_moment: ExpMoment { theta, estimate, se, finite: theta < fit.slope.abs() },
        censored_fraction,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_pair_contracts_exactly() {
        let m = SdeModel::linear(DMatrix::identity(2, 2) * -1.0, DMatrix::identity(2, 2)).unwrap();
        let b = synchronous_pair_batch(&m, &[1.0, 0.0], &[-1.0, 2.0], 2.0, 0.01, 10, 3).unwrap();
        // Euler gives Δ_n = (1-dt)^n Δ_0
        let s = b.report.statistic.unwrap();
        assert_eq!(s, 1.0);
        assert!(b.report.passed);
        let last = b.x.t_grid.len() - 1;
        for p in 0..10 {
            let d = b.x.state(p, last)[0] - b.y.state(p, last)[0];
            assert!((d - 2.0 * 0.99f64.powi(200)).abs() < 1e-12);
        }
    }

    #[test]
    fn coincident_starts_are_a_trivial_pass() {
        let m = SdeModel::linear(DMatrix::identity(1, 1) * -1.0, DMatrix::identity(1, 1)).unwrap();
        let b = synchronous_pair_batch(&m, &[1.0], &[1.0], 1.0, 0.1, 3, 0).unwrap();
        assert!(b.report.passed && b.report.statistic.is_none() && b.report.warning.is_some());
    }

    #[test]
    fn pair_batch_needs_declared_rate() {
        let m = SdeModel::example_e1(1.0, 1.0).unwrap();
        assert!(synchronous_pair_batch(&m, &[0.0, 0.0], &[1.0, 0.0], 1.0, 0.1, 2, 0).is_err());
    }

    #[test]
    fn identical_laws_always_couple() {
        let g = Gaussian { mean: 0.3, sd: 2.0 };
        let draws = maximal_coupling_batch(&g, &g, 1000, 5).unwrap();
        assert!(draws.iter().all(|d| d.coupled && d.z1 == d.z2));
    }

    #[test]
    fn disjoint_laws_never_couple() {
        let p = Uniform { lo: 0.0, hi: 1.0 };
        let q = Uniform { lo: 2.0, hi: 3.0 };
        let draws = maximal_coupling_batch(&p, &q, 1000, 5).unwrap();
        assert!(draws.iter().all(|d| !d.coupled && d.z1[0] < 1.0 && d.z2[0] >= 2.0));
    }

    #[test]
    fn discrete_coupling_meets_at_overlap_rate() {
        let p = [0.7, 0.3];
        let q = [0.4, 0.6];
        let mut r = rng::stream(1, &[9]);
        let n = 40_000;
        let mut meet = 0;
        let mut first_j = 0;
        for _ in 0..n {
            let (i, j) = discrete_maximal_coupling(&p, &q, &mut r);
            meet += (i == j) as usize;
            first_j += (j == 0) as usize;
        }
        let rate = meet as f64 / n as f64;
        assert!((rate - 0.7).abs() < 0.01, "{rate}");
        assert!((first_j as f64 / n as f64 - 0.4).abs() < 0.01);
    }

    #[test]
    fn finite_chain_equal_starts() {
        let p = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.4, 0.6]);
        let run = finite_chain_coupling_run(&p, 1, 1, 10, 20, 0).unwrap();
        assert!(run.tau_samples.iter().all(|t| *t == 0));
    }

    #[test]
    fn tail_fit_on_geometric_samples() {
        let mut r = rng::stream(11, &[]);
        let taus: Vec<usize> = (0..10_000)
            .map(|_| {
                let mut t = 1;
                while r.random::<f64>() < 0.5 {
                    t += 1;
                }
                t
            })
            .collect();
        let run = synthetic_run(taus, 100);
        let TailVerdict::Geometric(fit) = coupling_time_tail(&run, None).unwrap() else { panic!() };
        assert!((0.45..=0.55).contains(&fit.p_fit), "{}", fit.p_fit);
        assert!(fit.exp_moment.finite);
    }

    #[test]
    fn tail_fit_point_mass_and_censoring() {
        let run = synthetic_run(vec![3; 100], 50);
        assert_eq!(coupling_time_tail(&run, None).unwrap(), TailVerdict::PointMass { tau: 3 });
        let mut run = synthetic_run(vec![3; 100], 50);
        for c in run.censored.iter_mut().take(60) {
            *c = true;
        }
        assert!(matches!(coupling_time_tail(&run, None), Err(ErgoError::Censored { .. })));
        let run = synthetic_run(vec![3; 20], 50);
        assert!(matches!(coupling_time_tail(&run, None), Err(ErgoError::SampleSize { .. })));
    }

    fn synthetic_run(taus: Vec<usize>, cap: usize) -> CouplingRun {
        let n = taus.len();
        CouplingRun {
            trials: n,
            censored: taus.iter().map(|t| *t >= cap).collect(),
            tau_samples: taus.into_iter().map(|t| t.min(cap)).collect(),
            cap,
            tau1_samples: vec![None; n],
            r_star: 1.0,
            t_chain: 1.0,
            p_hat: 0.0,
            merge_attempts: 0,
            merge_failures: 0,
            diverged: 0,
            bin_resolution: 0.0,
            trajectories: vec![],
        }
    }
}
