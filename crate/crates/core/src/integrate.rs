//! Path simulation: Euler–Maruyama with exactly timed jumps for general
//! models, and the exact-in-law sampler for the example-e1 model.
//!
//! Path `p` of a batch with seed `s` draws its Gaussian noise from stream
//! `(s, PATH, p)` and its jumps from `(s, JUMPS, p)`. Each Euler step
//! consumes `d` normals (plus `d` more under Gaussian substitution), in
//! order, so two batches with equal seeds and grids share their Brownian
//! increments.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_range, ErgoError, Result};
use crate::model::SdeModel;
use crate::noise::{JumpRecord, PreparedLevy};
use crate::rng::{self, label, StreamRng};

/// Paths whose norm exceeds this are marked diverged.
pub const OVERFLOW_GUARD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    ExactE1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub dim: usize,
    pub n_paths: usize,
    /// Recorded times; a single entry for terminal-only batches.
    pub t_grid: Vec<f64>,
    pub terminal_only: bool,
    /// Row-major `[path][grid][dim]`.
    pub states: Vec<f64>,
    pub diverged: Vec<bool>,
    pub seed: u64,
    pub scheme: Scheme,
}

impl PathBatch {
    pub fn state(&self, path: usize, grid: usize) -> &[f64] {
        let g = self.t_grid.len();
        let off = (path * g + grid) * self.dim;
        &self.states[off..off + self.dim]
    }

    pub fn terminal(&self, path: usize) -> &[f64] {
        self.state(path, self.t_grid.len() - 1)
    }

    pub fn n_diverged(&self) -> usize {
        self.diverged.iter().filter(|d| **d).count()
    }

    /// States at one recorded time, diverged paths excluded.
    pub fn column(&self, grid: usize) -> Vec<Vec<f64>> {
        (0..self.n_paths).filter(|p| !self.diverged[*p]).map(|p| self.state(p, grid).to_vec()).collect()
    }

    /// CSV with header `path,t,x1..xd`; terminal-only batches omit `t`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let coords: Vec<String> = (1..=self.dim).map(|i| format!("x{i}")).collect();
        if self.terminal_only {
            writeln!(w, "path,{}", coords.join(","))?;
        } else {
            writeln!(w, "path,t,{}", coords.join(","))?;
        }
        for p in 0..self.n_paths {
            for (g, t) in self.t_grid.iter().enumerate() {
                let vals: Vec<String> = self.state(p, g).iter().map(|v| v.to_string()).collect();
                if self.terminal_only {
                    writeln!(w, "{p},{}", vals.join(","))?;
                } else {
                    writeln!(w, "{p},{t},{}", vals.join(","))?;
                }
            }
        }
        Ok(())
    }
}

/// Number of steps of size `dt` covering `horizon`; `dt` must divide it up
/// to rounding.
pub fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    ensure_range("dt", dt, dt > 0.0 && dt.is_finite(), "(0, inf)")?;
    ensure_range("horizon", horizon, horizon >= 0.0 && horizon.is_finite(), "[0, inf)")?;
    let n = (horizon / dt).round();
    if (n * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(ErgoError::Input(format!("dt = {dt} does not divide horizon = {horizon}")));
    }
    Ok(n as usize)
}

/// Euler–Maruyama stepper bound to one model and step size.
pub struct EulerEngine<'a> {
    model: &'a SdeModel,
    pub dt: f64,
    levy: Option<PreparedLevy>,
}

impl<'a> EulerEngine<'a> {
    pub fn new(model: &'a SdeModel, dt: f64) -> Result<Self> {
        ensure_range("dt", dt, dt > 0.0 && dt.is_finite(), "(0, inf)")?;
        let levy = model.levy.as_ref().map(PreparedLevy::new).transpose()?;
        Ok(EulerEngine { model, dt, levy })
    }

    pub fn model(&self) -> &SdeModel {
        self.model
    }

    /// Jumps for a path running `horizon` time units.
    pub fn sample_jumps(&self, horizon: f64, rng: &mut StreamRng) -> Result<JumpRecord> {
        match &self.levy {
            Some(l) => l.sample(horizon, rng),
            None => Ok(JumpRecord { times: vec![], sizes: vec![], compensator_drift: vec![0.0; self.model.dim()] }),
        }
    }

    /// Advance `x` by `n_steps` steps starting at time 0, calling `record`
    /// after every step with the step index (1-based) and the state.
    /// Returns `false` if the path crossed the overflow guard.
    pub fn advance(
        &self,
        x: &mut [f64],
        n_steps: usize,
        normals: &mut StreamRng,
        jumps: &JumpRecord,
        mut record: impl FnMut(usize, &[f64]),
    ) -> bool {
        let d = self.model.dim();
        let dt = self.dt;
        let sd = dt.sqrt();
        let a1 = &self.model.a1;
        let a2 = &self.model.a2;
        let sub = self.levy.as_ref().and_then(|l| l.substitute_factor.as_ref());
        let sub = sub.map(|g| a2 * g);
        let mut b = vec![0.0; d];
        let mut dw = vec![0.0; d];
        let mut dw2 = vec![0.0; d];
        let mut next_jump = 0usize;
        for n in 0..n_steps {
            for v in dw.iter_mut() {
                *v = sd * normals.sample::<f64, _>(StandardNormal);
            }
            if sub.is_some() {
                for v in dw2.iter_mut() {
                    *v = sd * normals.sample::<f64, _>(StandardNormal);
                }
            }
            let t0 = n as f64 * dt;
            let t1 = (n + 1) as f64 * dt;
            let mut s = t0;
            while next_jump < jumps.times.len() && jumps.times[next_jump] <= t1 {
                let tau = jumps.times[next_jump].max(s);
                self.model.drift.eval_into(x, &mut b);
                for i in 0..d {
                    x[i] += b[i] * (tau - s);
                }
                let z = &jumps.sizes[next_jump];
                add_mat_vec(x, a2, z);
                s = tau;
                next_jump += 1;
            }
            self.model.drift.eval_into(x, &mut b);
            for i in 0..d {
                x[i] += b[i] * (t1 - s);
            }
            add_mat_vec(x, a1, &dw);
            if let Some(g) = &sub {
                add_mat_vec(x, g, &dw2);
            }
            let nrm2: f64 = x.iter().map(|v| v * v).sum();
            if !(nrm2 <= OVERFLOW_GUARD * OVERFLOW_GUARD) {
                return false;
            }
            record(n + 1, x);
        }
        true
    }
}

#[inline]
fn add_mat_vec(x: &mut [f64], m: &DMatrix<f64>, v: &[f64]) {
    let d = x.len();
    for i in 0..d {
        let mut s = 0.0;
        for j in 0..v.len() {
            s += m[(i, j)] * v[j];
        }
        x[i] += s;
    }
}

/// One path with the batch addressing scheme, recording at the given step
/// indices (0 records the start). Diverged paths are filled with NaN from
/// the first missed record on.
fn run_path(
    engine: &EulerEngine<'_>,
    x0: &[f64],
    n_steps: usize,
    record_steps: &[usize],
    seed: u64,
    path: u64,
) -> Result<(Vec<f64>, bool)> {
    let d = x0.len();
    let mut normals = rng::stream(seed, &[label::PATH, path]);
    let mut jr = rng::stream(seed, &[label::JUMPS, path]);
    let jumps = engine.sample_jumps(n_steps as f64 * engine.dt, &mut jr)?;
    let mut out = Vec::with_capacity(record_steps.len() * d);
    let mut next = 0usize;
    while next < record_steps.len() && record_steps[next] == 0 {
        out.extend_from_slice(x0);
        next += 1;
    }
    let mut x = x0.to_vec();
    let ok = engine.advance(&mut x, n_steps, &mut normals, &jumps, |n, state| {
        while next < record_steps.len() && record_steps[next] == n {
            out.extend_from_slice(state);
            next += 1;
        }
    });
    out.resize(record_steps.len() * d, f64::NAN);
    Ok((out, !ok))
}

fn check_start(model: &SdeModel, x0: &[f64]) -> Result<()> {
    if x0.len() != model.dim() {
        return Err(ErgoError::Config(format!(
            "start point has length {}, model dimension is {}",
            x0.len(),
            model.dim()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(ErgoError::Input("start point is not finite".into()));
    }
    Ok(())
}

/// Euler ensemble recorded at `times` (each a multiple of `dt`).
pub fn euler_batch_at(
    model: &SdeModel,
    x0: &[f64],
    times: &[f64],
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<PathBatch> {
    check_start(model, x0)?;
    if times.is_empty() || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(ErgoError::Input("record times must be nonempty and nondecreasing".into()));
    }
    if n_paths == 0 {
        return Err(ErgoError::Input("n_paths must be positive".into()));
    }
    let steps: Vec<usize> = times.iter().map(|t| step_count(*t, dt)).collect::<Result<_>>()?;
    let n_steps = *steps.last().unwrap();
    let engine = EulerEngine::new(model, dt)?;
    let results: Vec<(Vec<f64>, bool)> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| run_path(&engine, x0, n_steps, &steps, seed, p))
        .collect::<Result<_>>()?;
    let mut states = Vec::with_capacity(n_paths * times.len() * x0.len());
    let mut diverged = Vec::with_capacity(n_paths);
    for (s, dv) in results {
        states.extend(s);
        diverged.push(dv);
    }
    if diverged.iter().all(|d| *d) {
        return Err(ErgoError::Diverged { diverged: n_paths });
    }
    Ok(PathBatch {
        dim: x0.len(),
        n_paths,
        t_grid: times.to_vec(),
        terminal_only: false,
        states,
        diverged,
        seed,
        scheme: Scheme::Euler,
    })
}

pub fn euler_batch(
    model: &SdeModel,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
    terminal_only: bool,
) -> Result<PathBatch> {
    let n = step_count(horizon, dt)?;
    if n == 0 {
        return Err(ErgoError::Input("horizon must be positive".into()));
    }
    let times: Vec<f64> = if terminal_only { vec![horizon] } else { (0..=n).map(|i| i as f64 * dt).collect() };
    let mut batch = euler_batch_at(model, x0, &times, dt, n_paths, seed)?;
    batch.terminal_only = terminal_only;
    Ok(batch)
}

/// Law of the OU coordinate `dY = -kY dt + sigma dW` at time `t`:
/// `(e^{-kt} y0, sigma^2 (1 - e^{-2kt}) / (2k))`.
pub fn ou_moments(k: f64, sigma: f64, y0: f64, t: f64) -> Result<(f64, f64)> {
    ensure_range("k", k, k > 0.0, "(0, inf)")?;
    ensure_range("t", t, t >= 0.0, "[0, inf]")?;
    let e = (-k * t).exp();
    Ok((e * y0, sigma * sigma * (1.0 - e * e) / (2.0 * k)))
}

/// Example-e1 paths on a uniform grid of `grid_n` points over
/// `[0, horizon]`. `Y` uses the exact OU transition; `X` integrates
/// `e^{-k(t-s)} Y_s^2` by the trapezoidal rule over the exact `Y` grid.
pub fn exact_e1_batch(
    k: f64,
    sigma: f64,
    x0: [f64; 2],
    horizon: f64,
    grid_n: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathBatch> {
    ensure_range("k", k, k > 0.0, "(0, inf)")?;
    ensure_range("sigma", sigma, sigma != 0.0 && sigma.is_finite(), "nonzero")?;
    ensure_range("horizon", horizon, horizon > 0.0, "(0, inf)")?;
    if grid_n < 2 || n_paths == 0 {
        return Err(ErgoError::Input("grid_n must be >= 2 and n_paths positive".into()));
    }
    let h = horizon / (grid_n - 1) as f64;
    let decay = (-k * h).exp();
    let sd = sigma * ((1.0 - decay * decay) / (2.0 * k)).sqrt();
    let paths: Vec<Vec<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let mut r = rng::stream(seed, &[label::PATH, p]);
            let mut out = Vec::with_capacity(grid_n * 2);
            let (mut x, mut y) = (x0[0], x0[1]);
            out.extend_from_slice(&[x, y]);
            for _ in 1..grid_n {
                // first normal is the unused W_1 increment of the Euler layout
                let _: f64 = r.sample(StandardNormal);
                let z: f64 = r.sample(StandardNormal);
                let y_next = decay * y + sd * z;
                x = decay * x + 0.5 * h * (decay * y * y + y_next * y_next);
                y = y_next;
                out.extend_from_slice(&[x, y]);
            }
            out
        })
        .collect();
    Ok(PathBatch {
        dim: 2,
        n_paths,
        t_grid: (0..grid_n).map(|i| i as f64 * h).collect(),
        terminal_only: false,
        states: paths.concat(),
        diverged: vec![false; n_paths],
        seed,
        scheme: Scheme::ExactE1,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentCurve {
    pub times: Vec<f64>,
    pub mean_sq: Vec<f64>,
    pub se: Vec<f64>,
}

/// Empirical `E|X_t|^2` at each recorded time.
pub fn second_moment_curve(batch: &PathBatch) -> MomentCurve {
    let mut mean_sq = Vec::new();
    let mut se = Vec::new();
    for g in 0..batch.t_grid.len() {
        let v: Vec<f64> = batch.column(g).iter().map(|p| p.iter().map(|x| x * x).sum()).collect();
        let (m, s) = crate::stats::mean_se(&v);
        mean_sq.push(m);
        se.push(s);
    }
    MomentCurve { times: batch.t_grid.clone(), mean_sq, se }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentBoundReport {
    /// `max_t (E|X_t|^2 - |x0|^2 e^{-kt})`.
    pub c_hat: f64,
    pub excess: Vec<f64>,
    /// Mean excess over the central quarter `[3T/8, 5T/8]`.
    pub middle_quarter_mean: f64,
    /// Mean excess over the last quarter `[3T/4, T]`.
    pub last_quarter_mean: f64,
    pub no_upward_trend: bool,
}

/// Check `E|X_t|^2 <= |x0|^2 e^{-kt} + C` for a single constant: the excess
/// curve is bounded by its maximum and must not trend upward (last-quarter
/// mean at most 1.1 times the middle-quarter mean).
pub fn moment_bound_check(curve: &MomentCurve, x0: &[f64], k: f64) -> Result<MomentBoundReport> {
    let r0: f64 = x0.iter().map(|v| v * v).sum();
    let excess: Vec<f64> = curve.times.iter().zip(&curve.mean_sq).map(|(t, m)| m - r0 * (-k * t).exp()).collect();
    let t_end = *curve.times.last().ok_or_else(|| ErgoError::Input("empty moment curve".into()))?;
    let window_mean = |lo: f64, hi: f64| -> Result<f64> {
        let v: Vec<f64> = curve
            .times
            .iter()
            .zip(&excess)
            .filter(|(t, _)| **t >= lo - 1e-12 && **t <= hi + 1e-12)
            .map(|(_, e)| *e)
            .collect();
        if v.is_empty() {
            return Err(ErgoError::Input("moment curve too coarse for quarter windows".into()));
        }
        Ok(crate::stats::mean(&v))
    };
    let middle = window_mean(3.0 * t_end / 8.0, 5.0 * t_end / 8.0)?;
    let last = window_mean(0.75 * t_end, t_end)?;
    let c_hat = excess.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(MomentBoundReport {
        c_hat,
        excess,
        middle_quarter_mean: middle,
        last_quarter_mean: last,
        no_upward_trend: last <= 1.1 * middle,
    })
}
