//! Brownian increments, compound-Poisson sampling of a truncated Lévy
//! measure, and the Orey order-condition diagnostic for small-jump
//! densities.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use statrs::function::gamma::gamma;

use crate::error::{ensure_range, ErgoError, Result};
use crate::model::ScalarMap;
use crate::rng::{self, label, StreamRng};
use crate::stats::adaptive_simpson;

pub type JumpSampler = Arc<dyn Fn(&mut StreamRng) -> Vec<f64> + Send + Sync>;

/// Small-jump density `kappa` on the punctured unit ball.
#[derive(Clone)]
pub enum SmallJumpDensity {
    /// `scale * |z|^(-d-alpha)`.
    PowerLaw { scale: f64 },
    /// `scale * |z|^(-d-alpha) * (1 + |z|)`.
    PerturbedPowerLaw { scale: f64 },
    /// Radial profile, piecewise linear in `|z|` between table radii and
    /// constant beyond the ends.
    RadialTable { radii: Vec<f64>, values: Vec<f64> },
    /// Arbitrary density. Must be symmetric; checked on probe points.
    Custom(ScalarMap),
}

impl fmt::Debug for SmallJumpDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::PowerLaw { scale } => write!(f, "PowerLaw {{ scale: {scale} }}"),
            Self::PerturbedPowerLaw { scale } => write!(f, "PerturbedPowerLaw {{ scale: {scale} }}"),
            Self::RadialTable { radii, values } => {
                write!(f, "RadialTable {{ radii: {radii:?}, values: {values:?} }}")
            }
            Self::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

#[derive(Clone)]
pub enum LargeJumps {
    None,
    /// `|z|` uniform on `[1, r_max]`, direction uniform.
    UniformRadius {
        r_max: f64,
    },
    /// Must return vectors with `|z| >= 1`.
    Custom(JumpSampler),
}

impl fmt::Debug for LargeJumps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "None"),
            Self::UniformRadius { r_max } => write!(f, "UniformRadius {{ r_max: {r_max} }}"),
            Self::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmallJumpMode {
    Drop,
    GaussianSubstitute,
}

#[derive(Debug, Clone)]
pub struct LevyMeasureSpec {
    pub dim: usize,
    pub kappa: SmallJumpDensity,
    pub alpha_index: f64,
    /// Total mass of the measure outside the unit ball.
    pub large_jump_rate: f64,
    pub large_jumps: LargeJumps,
    /// Jumps with `|z| < truncation_rho` are not sampled. `1` empties the shell.
    pub truncation_rho: f64,
    pub small_jump_mode: SmallJumpMode,
}

pub const DEFAULT_RHO: f64 = 0.01;

impl LevyMeasureSpec {
    /// Unit-scale power law `|z|^(-d-alpha)` with defaults for everything else.
    pub fn power_law(dim: usize, alpha_index: f64) -> Result<Self> {
        let spec = LevyMeasureSpec {
            dim,
            kappa: SmallJumpDensity::PowerLaw { scale: 1.0 },
            alpha_index,
            large_jump_rate: 0.0,
            large_jumps: LargeJumps::None,
            truncation_rho: DEFAULT_RHO,
            small_jump_mode: SmallJumpMode::Drop,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(ErgoError::Config("levy dimension must be positive".into()));
        }
        let a = self.alpha_index;
        ensure_range("alpha_index", a, a > 0.0 && a < 2.0, "(0, 2)")?;
        let r = self.truncation_rho;
        ensure_range("truncation_rho", r, r > 0.0 && r <= 1.0, "(0, 1]")?;
        let l = self.large_jump_rate;
        ensure_range("large_jump_rate", l, l >= 0.0 && l.is_finite(), "[0, inf)")?;
        if l > 0.0 && matches!(self.large_jumps, LargeJumps::None) {
            return Err(ErgoError::Config("large_jump_rate > 0 needs a large-jump sampler".into()));
        }
        if let LargeJumps::UniformRadius { r_max } = self.large_jumps {
            ensure_range("r_max", r_max, r_max >= 1.0 && r_max.is_finite(), "[1, inf)")?;
        }
        match &self.kappa {
            SmallJumpDensity::PowerLaw { scale } | SmallJumpDensity::PerturbedPowerLaw { scale } => {
                ensure_range("scale", *scale, *scale > 0.0, "(0, inf)")?;
            }
            SmallJumpDensity::RadialTable { radii, values } => {
                if radii.len() < 2 || radii.len() != values.len() {
                    return Err(ErgoError::Config("radial table needs >= 2 matched (radius, value) rows".into()));
                }
                if radii.windows(2).any(|w| w[1] <= w[0]) || values.iter().any(|v| *v < 0.0) {
                    return Err(ErgoError::Config("radial table radii must increase and values be nonnegative".into()));
                }
            }
            SmallJumpDensity::Custom(f) => {
                let mut rng = rng::stream(0, &[label::PROBE]);
                for _ in 0..64 {
                    let z = random_in_ball(&mut rng, self.dim);
                    let neg: Vec<f64> = z.iter().map(|v| -v).collect();
                    let (a, b) = (f(&z), f(&neg));
                    if (a - b).abs() > 1e-9 * a.abs().max(b.abs()).max(1e-300) {
                        return Err(ErgoError::Config(format!(
                            "small-jump density is not symmetric at {z:?}: {a} vs {b}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn radial_profile(&self, r: f64) -> Option<f64> {
        let d = self.dim as f64;
        let a = self.alpha_index;
        match &self.kappa {
            SmallJumpDensity::PowerLaw { scale } => Some(scale * r.powf(-d - a)),
            SmallJumpDensity::PerturbedPowerLaw { scale } => Some(scale * r.powf(-d - a) * (1.0 + r)),
            SmallJumpDensity::RadialTable { radii, values } => Some(interp(radii, values, r)),
            SmallJumpDensity::Custom(_) => None,
        }
    }

    fn is_radial(&self) -> bool {
        !matches!(self.kappa, SmallJumpDensity::Custom(_))
    }

    /// `kappa(z)`; zero outside `0 < |z| < 1`.
    pub fn kappa(&self, z: &[f64]) -> f64 {
        let r = norm(z);
        if r <= 0.0 || r >= 1.0 {
            return 0.0;
        }
        match &self.kappa {
            SmallJumpDensity::Custom(f) => f(z),
            _ => self.radial_profile(r).unwrap_or(0.0),
        }
    }

    /// `int_{a <= |z| < b} |z|^p kappa(z) dz` for the radial and 1-d cases,
    /// by quadrature in `log r`.
    fn radial_moment(&self, p: i32, a: f64, b: f64, tol: f64) -> Result<f64> {
        let d = self.dim as i32;
        let sphere = sphere_area(self.dim);
        let (lo, hi) = (a.ln(), b.ln());
        if hi <= lo {
            return Ok(0.0);
        }
        let integrand = |u: f64| {
            let r = u.exp();
            let f = match &self.kappa {
                SmallJumpDensity::Custom(k) => 0.5 * (k(&[r]) + k(&[-r])),
                _ => self.radial_profile(r).unwrap_or(0.0),
            };
            r.powi(d + p) * f
        };
        let (v, _) = adaptive_simpson(integrand, lo, hi, tol)?;
        Ok(sphere * v)
    }

    fn radial_or_1d(&self) -> bool {
        self.is_radial() || self.dim == 1
    }

    /// Rate of the compound-Poisson part: `int_{rho <= |z| < 1} kappa dz`.
    pub fn shell_rate(&self) -> Result<f64> {
        if self.truncation_rho >= 1.0 {
            return Ok(0.0);
        }
        if self.radial_or_1d() {
            self.radial_moment(0, self.truncation_rho, 1.0, 1e-10)
        } else {
            let rho = self.truncation_rho;
            Ok(self.mc_shell_integral(rho, 1.0, |_| 1.0))
        }
    }

    /// `int_{|z| <= eps} |z|^2 kappa(z) dz`.
    pub fn inner_second_moment(&self, eps: f64, tol: f64) -> Result<f64> {
        if self.radial_or_1d() {
            // Lower cut where the power-law tail is below double precision.
            let span = (40.0 / (2.0 - self.alpha_index)).min(700.0);
            let lo = eps * (-span).exp();
            self.radial_moment(2, lo, eps, tol * eps.powf(2.0 - self.alpha_index))
        } else {
            let lo = eps * 1e-6;
            Ok(self.mc_shell_integral(lo, eps, |z| z.iter().map(|v| v * v).sum()))
        }
    }

    /// Monte Carlo `int_{a<=|z|<b} g(z) kappa(z) dz` with log-uniform radii.
    fn mc_shell_integral(&self, a: f64, b: f64, g: impl Fn(&[f64]) -> f64 + Sync) -> f64 {
        const N: usize = 200_000;
        let d = self.dim;
        let span = (b / a).ln();
        let sphere = sphere_area(d);
        let vals: Vec<f64> = (0..N as u64)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(0, &[label::PROBE, i]);
                let u: f64 = r.random();
                let rad = a * (u * span).exp();
                let dir = random_direction(&mut r, d);
                let z: Vec<f64> = dir.iter().map(|v| v * rad).collect();
                g(&z) * self.kappa(&z) * rad.powi(d as i32)
            })
            .collect();
        sphere * span * vals.iter().sum::<f64>() / N as f64
    }

    /// Covariance `int_{|z|<rho} z z^T kappa dz` of the dropped small jumps.
    pub fn substitute_covariance(&self) -> Result<DMatrix<f64>> {
        let d = self.dim;
        let m2 = self.inner_second_moment(self.truncation_rho, 1e-10)?;
        Ok(DMatrix::identity(d, d) * (m2 / d as f64))
    }

    /// Estimate of `E|Z|^2` for the large-jump sampler and whether the
    /// running estimate has settled (first half vs full sample within 25%).
    pub fn large_jump_second_moment(&self, n: usize, seed: u64) -> Result<(f64, bool)> {
        if matches!(self.large_jumps, LargeJumps::None) {
            return Ok((0.0, true));
        }
        let prepared = PreparedLevy::new(self)?;
        let vals: Vec<f64> = (0..n as u64)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(seed, &[label::PROBE, i]);
                prepared.large_jump(&mut r).map(|z| z.iter().map(|v| v * v).sum())
            })
            .collect::<Result<_>>()?;
        let half = vals[..n / 2].iter().sum::<f64>() / (n / 2) as f64;
        let full = vals.iter().sum::<f64>() / n as f64;
        Ok((full, (half - full).abs() <= 0.25 * full.max(1e-300)))
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let i = xs.partition_point(|v| *v <= x) - 1;
    let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] + t * (ys[i + 1] - ys[i])
}

pub(crate) fn norm(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Surface area of the unit sphere in `R^d` (2 for `d = 1`).
pub fn sphere_area(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    2.0 * PI.powf(h) / gamma(h)
}

fn random_direction(rng: &mut StreamRng, d: usize) -> Vec<f64> {
    if d == 1 {
        return vec![if rng.random::<bool>() { 1.0 } else { -1.0 }];
    }
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn random_in_ball(rng: &mut StreamRng, d: usize) -> Vec<f64> {
    let r: f64 = rng.random_range(0.01..0.99);
    random_direction(rng, d).into_iter().map(|v| v * r).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpRecord {
    pub times: Vec<f64>,
    pub sizes: Vec<Vec<f64>>,
    /// Zero for symmetric small-jump densities without compensation requests.
    pub compensator_drift: Vec<f64>,
}

impl JumpRecord {
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct JumpDraw {
    pub record: JumpRecord,
    /// Present in Gaussian-substitution mode.
    pub substitute_diffusion: Option<DMatrix<f64>>,
}

/// Pre-computed rates and envelope for repeated sampling from one spec.
#[derive(Debug, Clone)]
pub struct PreparedLevy {
    spec: LevyMeasureSpec,
    small_rate: f64,
    envelope_max: f64,
    /// Expected acceptance probability of the radial rejection step.
    pub acceptance: f64,
    /// Symmetric square root of the substitute covariance, when enabled.
    pub substitute_factor: Option<DMatrix<f64>>,
}

impl PreparedLevy {
    pub fn new(spec: &LevyMeasureSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.dim;
        let a = spec.alpha_index;
        let rho = spec.truncation_rho;
        let small_rate = spec.shell_rate()?;
        let mut envelope_max = 0.0f64;
        let mut acceptance = 1.0;
        if small_rate > 0.0 {
            // sup of kappa(z) |z|^(d+alpha) over the shell, probed on a log grid
            let n = 4000;
            let (margin, probes) = match &spec.kappa {
                SmallJumpDensity::PowerLaw { .. } => (1.0, 1),
                SmallJumpDensity::Custom(_) => (1.5, 16),
                _ => (1.05, 1),
            };
            let mut r = rng::stream(0, &[label::PROBE, 1]);
            for i in 0..=n {
                let rad = rho * (1.0 / rho).powf(i as f64 / n as f64) * (1.0 - 1e-12);
                for _ in 0..probes {
                    let z: Vec<f64> = random_direction(&mut r, d).into_iter().map(|v| v * rad).collect();
                    envelope_max = envelope_max.max(spec.kappa(&z) * rad.powf(d as f64 + a));
                }
            }
            envelope_max *= margin;
            let envelope_mass = envelope_max * sphere_area(d) * (rho.powf(-a) - 1.0) / a;
            acceptance = small_rate / envelope_mass;
            if !(acceptance >= 1e-3) {
                return Err(ErgoError::Envelope { rate: acceptance });
            }
        }
        let substitute_factor = match spec.small_jump_mode {
            SmallJumpMode::Drop => None,
            SmallJumpMode::GaussianSubstitute => Some(symmetric_sqrt(&spec.substitute_covariance()?)),
        };
        Ok(PreparedLevy { spec: spec.clone(), small_rate, envelope_max, acceptance, substitute_factor })
    }

    pub fn spec(&self) -> &LevyMeasureSpec {
        &self.spec
    }

    pub fn small_rate(&self) -> f64 {
        self.small_rate
    }

    fn small_jump(&self, rng: &mut StreamRng) -> Result<Vec<f64>> {
        let spec = &self.spec;
        let d = spec.dim;
        let a = spec.alpha_index;
        let top = spec.truncation_rho.powf(-a);
        for _ in 0..1_000_000 {
            let u: f64 = rng.random();
            let rad = (top - u * (top - 1.0)).powf(-1.0 / a);
            let z: Vec<f64> = random_direction(rng, d).into_iter().map(|v| v * rad).collect();
            let ratio = spec.kappa(&z) * rad.powf(d as f64 + a) / self.envelope_max;
            if rng.random::<f64>() < ratio {
                return Ok(z);
            }
        }
        Err(ErgoError::Envelope { rate: 0.0 })
    }

    fn large_jump(&self, rng: &mut StreamRng) -> Result<Vec<f64>> {
        let z = match &self.spec.large_jumps {
            LargeJumps::None => return Err(ErgoError::Config("no large-jump sampler".into())),
            LargeJumps::UniformRadius { r_max } => {
                let rad = rng.random_range(1.0..=*r_max);
                random_direction(rng, self.spec.dim).into_iter().map(|v| v * rad).collect()
            }
            LargeJumps::Custom(f) => f(rng),
        };
        if z.len() != self.spec.dim || !(norm(&z) >= 1.0) {
            return Err(ErgoError::Input(format!("large-jump sampler returned {z:?}, need |z| >= 1")));
        }
        Ok(z)
    }

    /// Jumps on `(0, horizon]`, merged and sorted by time.
    pub fn sample(&self, horizon: f64, rng: &mut StreamRng) -> Result<JumpRecord> {
        let mut events: Vec<(f64, Vec<f64>)> = Vec::new();
        let poisson = |mean: f64, rng: &mut StreamRng| -> Result<u64> {
            if mean <= 0.0 {
                return Ok(0);
            }
            let p = Poisson::new(mean).map_err(|e| ErgoError::Numeric(e.to_string()))?;
            Ok(p.sample(rng) as u64)
        };
        let n_small = poisson(self.small_rate * horizon, rng)?;
        for _ in 0..n_small {
            let t = horizon * (1.0 - rng.random::<f64>());
            events.push((t, self.small_jump(rng)?));
        }
        let n_large = poisson(self.spec.large_jump_rate * horizon, rng)?;
        for _ in 0..n_large {
            let t = horizon * (1.0 - rng.random::<f64>());
            events.push((t, self.large_jump(rng)?));
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (times, sizes) = events.into_iter().unzip();
        Ok(JumpRecord { times, sizes, compensator_drift: vec![0.0; self.spec.dim] })
    }
}

pub(crate) fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let sq = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sq) * eig.eigenvectors.transpose()
}

/// Jumps of one Lévy path on `(0, horizon]`.
pub fn sample_jumps(spec: &LevyMeasureSpec, horizon: f64, seed: u64) -> Result<JumpDraw> {
    ensure_range("horizon", horizon, horizon > 0.0, "(0, inf)")?;
    let prepared = PreparedLevy::new(spec)?;
    let mut r = rng::stream(seed, &[label::JUMPS]);
    let record = prepared.sample(horizon, &mut r)?;
    let substitute_diffusion = match spec.small_jump_mode {
        SmallJumpMode::Drop => None,
        SmallJumpMode::GaussianSubstitute => Some(spec.substitute_covariance()?),
    };
    Ok(JumpDraw { record, substitute_diffusion })
}

/// `n_steps x dim` centred Gaussian increments of variance `dt`. Row `i`
/// comes from the stream `(seed, i)`, so the array does not depend on the
/// worker count.
pub fn brownian_increments(n_steps: usize, dt: f64, dim: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n_steps == 0 || dim == 0 {
        return Err(ErgoError::Input("n_steps and dim must be positive".into()));
    }
    ensure_range("dt", dt, dt > 0.0 && dt.is_finite(), "(0, inf)")?;
    let sd = dt.sqrt();
    let rows: Vec<Vec<f64>> = (0..n_steps as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, &[label::BROWNIAN, i]);
            (0..dim).map(|_| sd * r.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect();
    Ok(DMatrix::from_fn(n_steps, dim, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OreyReport {
    /// `(eps, eps^(alpha-2) * int_{|z|<=eps} |z|^2 kappa dz)`.
    pub rows: Vec<(f64, f64)>,
    pub converging: bool,
}

/// Positive floor below which ratios count as vanishing.
pub const OREY_FLOOR: f64 = 1e-6;

/// Orey order-condition ratios over decreasing `eps_list`. The verdict is
/// positive iff successive ratios differ by less than 1% and all exceed
/// [`OREY_FLOOR`].
pub fn orey_ratio(spec: &LevyMeasureSpec, eps_list: &[f64], tol: f64) -> Result<OreyReport> {
    spec.validate()?;
    if eps_list.is_empty() || eps_list.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
        return Err(ErgoError::Input("eps_list entries must lie in (0, 1)".into()));
    }
    if eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(ErgoError::Input("eps_list must be decreasing".into()));
    }
    let a = spec.alpha_index;
    let rows = eps_list
        .iter()
        .map(|&eps| Ok((eps, eps.powf(a - 2.0) * spec.inner_second_moment(eps, tol)?)))
        .collect::<Result<Vec<_>>>()?;
    let positive = rows.iter().all(|(_, r)| *r > OREY_FLOOR);
    let settled = rows.windows(2).all(|w| (w[1].1 - w[0].1).abs() < 0.01 * w[0].1.abs());
    Ok(OreyReport { rows, converging: positive && settled })
}
