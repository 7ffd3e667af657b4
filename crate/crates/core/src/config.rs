//! Experiment configuration: a strict TOML schema with documented
//! defaults, resolution of model-dependent defaults, and model building.
//!
//! Unknown keys are errors. [`emit_config`] writes every effective value,
//! so a resolved config reproduces its run on its own.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coupling::ChainParams;
use crate::ergodicity::{TvDecayParams, TvMethod};
use crate::error::{ensure_range, ErgoError, Result};
use crate::hypoellipticity::{ChainOptions, DerivativeMode};
use crate::model::{LyapunovSpec, PolyTerm, SdeModel};
use crate::noise::{LargeJumps, LevyMeasureSpec, SmallJumpDensity, SmallJumpMode, DEFAULT_RHO};
use crate::stats::HistogramSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Simulate,
    Couple,
    TvDecay,
    DriftCheck,
    RankCheck,
    OreyCheck,
    InvariantCheck,
}

impl Experiment {
    pub fn id(self) -> &'static str {
        match self {
            Experiment::Simulate => "simulate",
            Experiment::Couple => "couple",
            Experiment::TvDecay => "tv-decay",
            Experiment::DriftCheck => "drift-check",
            Experiment::RankCheck => "rank-check",
            Experiment::OreyCheck => "orey-check",
            Experiment::InvariantCheck => "invariant-check",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeChoice {
    #[default]
    Euler,
    ExactE1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LyapunovChoice {
    /// `e1` for example-e1, `quadratic` otherwise.
    #[default]
    Auto,
    /// `1 + |x|^2`.
    Quadratic,
    /// `1 + |x_1| + x_2^2`.
    E1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelName {
    ExampleE1,
    Linear,
    LevyDissipative,
    Polynomial,
    Brownian,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: ModelName,
    /// Drift rate for example-e1 and levy-dissipative.
    #[serde(default = "one")]
    pub k: f64,
    /// Noise scale; the default `A1` is `sigma * I`.
    #[serde(default = "one")]
    pub sigma: f64,
    /// Rotation rate for levy-dissipative.
    #[serde(default)]
    pub omega: f64,
    /// Cubic damping for levy-dissipative.
    #[serde(default)]
    pub cubic: f64,
    /// State dimension for polynomial and brownian; 0 means inferred.
    #[serde(default)]
    pub dim: usize,
    /// Rows of `B` for the linear model.
    #[serde(default)]
    pub drift_matrix: Vec<Vec<f64>>,
    /// Rows of `A1`; empty means the model default.
    #[serde(default)]
    pub a1: Vec<Vec<f64>>,
    /// Rows of `A2`; empty means identity with a Levy block, zero without.
    #[serde(default)]
    pub a2: Vec<Vec<f64>>,
    #[serde(default)]
    pub terms: Vec<PolyTerm>,
    /// Declared one-sided Lipschitz rate, overriding the model's own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dissipativity_k: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KappaChoice {
    #[default]
    PowerLaw,
    PerturbedPowerLaw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SmallJumpChoice {
    #[default]
    Drop,
    GaussianSubstitute,
}

fn d_alpha() -> f64 {
    0.5
}
fn d_r_max() -> f64 {
    2.0
}
fn d_rho() -> f64 {
    DEFAULT_RHO
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevyConfig {
    #[serde(default = "d_alpha")]
    pub alpha_index: f64,
    #[serde(default)]
    pub kappa: KappaChoice,
    #[serde(default = "one")]
    pub scale: f64,
    /// Rate of jumps with `|z| >= 1`; their radius is uniform on `[1, r_max]`.
    #[serde(default)]
    pub large_jump_rate: f64,
    #[serde(default = "d_r_max")]
    pub r_max: f64,
    #[serde(default = "d_rho")]
    pub truncation_rho: f64,
    #[serde(default)]
    pub small_jump_mode: SmallJumpChoice,
}

impl Default for LevyConfig {
    fn default() -> Self {
        LevyConfig {
            alpha_index: d_alpha(),
            kappa: KappaChoice::PowerLaw,
            scale: 1.0,
            large_jump_rate: 0.0,
            r_max: d_r_max(),
            truncation_rho: d_rho(),
            small_jump_mode: SmallJumpChoice::Drop,
        }
    }
}

impl LevyConfig {
    pub fn to_spec(&self, dim: usize) -> Result<LevyMeasureSpec> {
        let spec = LevyMeasureSpec {
            dim,
            kappa: match self.kappa {
                KappaChoice::PowerLaw => SmallJumpDensity::PowerLaw { scale: self.scale },
                KappaChoice::PerturbedPowerLaw => SmallJumpDensity::PerturbedPowerLaw { scale: self.scale },
            },
            alpha_index: self.alpha_index,
            large_jump_rate: self.large_jump_rate,
            large_jumps: if self.large_jump_rate > 0.0 {
                LargeJumps::UniformRadius { r_max: self.r_max }
            } else {
                LargeJumps::None
            },
            truncation_rho: self.truncation_rho,
            small_jump_mode: match self.small_jump_mode {
                SmallJumpChoice::Drop => SmallJumpMode::Drop,
                SmallJumpChoice::GaussianSubstitute => SmallJumpMode::GaussianSubstitute,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

macro_rules! defaults {
    ($($name:ident: $ty:ty = $val:expr;)*) => {
        $(fn $name() -> $ty { $val })*
    };
}

defaults! {
    d_output: String = "ergokit-out".to_string();
    d_dt: f64 = 0.01;
    d_horizon: f64 = 5.0;
    d_n_paths: usize = 1000;
    d_csv_paths: usize = 20;
    d_bins: usize = 40;
    d_bootstrap: usize = 200;
    d_t_star: f64 = 2.0;
    d_grid_radius: f64 = 10.0;
    d_grid_step: f64 = 2.5;
    d_r_star: f64 = 6.0;
    d_delta: f64 = 0.5;
    d_max_steps: usize = 50;
    d_n_trials: usize = 200;
    d_n_kernel: usize = 2000;
    d_depth: usize = 4;
    d_fd_step: f64 = 1e-4;
    d_sv_tol: f64 = 1e-8;
    d_eps_list: Vec<f64> = vec![1e-2, 1e-3, 1e-4];
    d_quad_tol: f64 = 1e-10;
    d_t_burn: f64 = 15.0;
}

/// One experiment run. Numeric fields come first so the emitted TOML keeps
/// plain keys ahead of the `[model]` and `[levy]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required unless supplied on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Experiment>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_output")]
    pub output: String,
    #[serde(default)]
    pub plot: bool,

    // simulation
    #[serde(default = "d_dt")]
    pub dt: f64,
    #[serde(default = "d_horizon")]
    pub horizon: f64,
    #[serde(default = "d_n_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub scheme: SchemeChoice,
    /// Start point; empty means `(1, 0, ..)`.
    #[serde(default)]
    pub x0: Vec<f64>,
    /// Second start point; empty means `-x0`.
    #[serde(default)]
    pub y0: Vec<f64>,
    /// Paths written to the simulate CSV.
    #[serde(default = "d_csv_paths")]
    pub csv_paths: usize,

    // total variation
    /// Curve times; empty means `1, 1.25, .., 8`.
    #[serde(default)]
    pub times: Vec<f64>,
    /// Coordinates kept for histograms; empty means all.
    #[serde(default)]
    pub projection: Vec<usize>,
    #[serde(default)]
    pub tv_method: TvMethod,
    #[serde(default = "d_bins")]
    pub bins: usize,
    #[serde(default = "d_bootstrap")]
    pub bootstrap: usize,
    /// Fixed histogram range per coordinate; data-driven when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hist_range: Option<[f64; 2]>,

    // drift
    #[serde(default = "d_t_star")]
    pub t_star: f64,
    #[serde(default)]
    pub lyapunov: LyapunovChoice,
    /// Explicit drift or rank grid; empty means the box lattice below.
    #[serde(default)]
    pub grid: Vec<Vec<f64>>,
    #[serde(default = "d_grid_radius")]
    pub grid_radius: f64,
    #[serde(default = "d_grid_step")]
    pub grid_step: f64,
    /// Iterated-bound checks from `x0` after a passing drift fit.
    #[serde(default)]
    pub iterate_steps: usize,

    // coupling
    /// Chain step; `3 / dissipativity_k` (or `3 / k`) when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_chain: Option<f64>,
    #[serde(default = "d_r_star")]
    pub r_star: f64,
    #[serde(default = "d_delta")]
    pub delta: f64,
    #[serde(default = "d_max_steps")]
    pub max_steps: usize,
    #[serde(default = "d_n_trials")]
    pub n_trials: usize,
    #[serde(default = "d_n_kernel")]
    pub n_kernel: usize,
    /// Exponential-moment parameter; `|slope| / 2` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,

    // rank
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default)]
    pub derivative_mode: DerivativeMode,
    #[serde(default = "d_fd_step")]
    pub fd_step: f64,
    #[serde(default = "d_sv_tol")]
    pub sv_tol: f64,
    #[serde(default)]
    pub strict_paper_columns: bool,

    // orey
    #[serde(default = "d_eps_list")]
    pub eps_list: Vec<f64>,
    #[serde(default = "d_quad_tol")]
    pub quad_tol: f64,

    // invariant
    /// Starts for the invariant check; empty means `[x0, y0]`.
    #[serde(default)]
    pub starts: Vec<Vec<f64>>,
    #[serde(default = "d_t_burn")]
    pub t_burn: f64,

    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levy: Option<LevyConfig>,
}

/// Parse a TOML document and resolve its defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_unresolved(text)?.resolve()
}

/// Parse without resolving, so command-line overrides can be applied first.
pub fn parse_unresolved(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| ErgoError::Config(e.to_string()))
}

/// TOML text of a config; parsing it back gives the same config.
pub fn emit_config(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| ErgoError::Config(e.to_string()))
}

fn matrix(rows: &[Vec<f64>], name: &str, d: usize, cols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != cols) {
        return Err(ErgoError::Config(format!("{name} must be a {d}x{cols} table")));
    }
    Ok(DMatrix::from_fn(d, cols, |i, j| rows[i][j]))
}

fn check_point(p: &[f64], d: usize, name: &str) -> Result<()> {
    if p.len() != d {
        return Err(ErgoError::Config(format!("{name} has length {}, model dimension is {d}", p.len())));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Model dimension implied by the model block.
    pub fn model_dim(&self) -> Result<usize> {
        let m = &self.model;
        Ok(match m.name {
            ModelName::ExampleE1 | ModelName::LevyDissipative => 2,
            ModelName::Linear => m.drift_matrix.len(),
            ModelName::Polynomial | ModelName::Brownian => {
                if m.dim > 0 {
                    m.dim
                } else if let Some(t) = m.terms.first() {
                    t.powers.len()
                } else if m.name == ModelName::Brownian {
                    1
                } else {
                    return Err(ErgoError::Config("polynomial model needs dim or terms".into()));
                }
            }
        })
    }

    /// Build the model described by the `[model]` and `[levy]` blocks.
    pub fn build_model(&self) -> Result<SdeModel> {
        let m = &self.model;
        let d = self.model_dim()?;
        if d == 0 {
            return Err(ErgoError::Config("model dimension must be positive".into()));
        }
        let a1 =
            if m.a1.is_empty() { DMatrix::identity(d, d) * m.sigma } else { matrix(&m.a1, "a1", d, m.a1[0].len())? };
        let levy = self.levy.as_ref().map(|l| l.to_spec(d)).transpose()?;
        let a2 = if !m.a2.is_empty() {
            matrix(&m.a2, "a2", d, d)?
        } else if levy.is_some() {
            DMatrix::identity(d, d)
        } else {
            DMatrix::zeros(d, d)
        };
        let mut model = match m.name {
            ModelName::ExampleE1 => {
                if !m.a1.is_empty() || !m.a2.is_empty() || levy.is_some() {
                    return Err(ErgoError::Config("example-e1 takes only k and sigma".into()));
                }
                SdeModel::example_e1(m.k, m.sigma)?
            }
            ModelName::Linear => {
                let b = matrix(&m.drift_matrix, "drift_matrix", d, d)?;
                let mut model = SdeModel::linear(b, a1)?;
                if let Some(l) = levy {
                    model.a2 = a2;
                    model = model.with_levy(l)?;
                }
                model
            }
            ModelName::LevyDissipative => {
                let l = match levy {
                    Some(l) => l,
                    None => LevyConfig::default().to_spec(2)?,
                };
                let mut model = SdeModel::levy_dissipative(m.k, m.omega, m.cubic, l)?;
                if !m.a1.is_empty() {
                    model.a1 = a1;
                }
                if !m.a2.is_empty() {
                    model.a2 = a2;
                }
                model
            }
            ModelName::Polynomial | ModelName::Brownian => {
                if m.name == ModelName::Brownian && !m.terms.is_empty() {
                    return Err(ErgoError::Config("brownian model has no drift terms".into()));
                }
                let mut model = SdeModel::polynomial(d, m.terms.clone(), a1, a2)?;
                if m.name == ModelName::Brownian {
                    model.name = "brownian".into();
                }
                if let Some(l) = levy {
                    model = model.with_levy(l)?;
                }
                model
            }
        };
        if let Some(k) = m.dissipativity_k {
            ensure_range("dissipativity_k", k, k > 0.0, "(0, inf)")?;
            model = model.with_dissipativity(k);
        }
        Ok(model)
    }

    /// Fill model-dependent defaults and validate ranges. Idempotent.
    pub fn resolve(mut self) -> Result<ExperimentConfig> {
        if self.experiment.is_none() {
            return Err(ErgoError::Config("missing key `experiment`".into()));
        }
        if self.model.name == ModelName::LevyDissipative && self.levy.is_none() {
            self.levy = Some(LevyConfig::default());
        }
        let model = self.build_model()?;
        let d = model.dim();
        if self.model.dim == 0 && matches!(self.model.name, ModelName::Polynomial | ModelName::Brownian) {
            self.model.dim = d;
        }
        ensure_range("dt", self.dt, self.dt > 0.0 && self.dt.is_finite(), "(0, inf)")?;
        ensure_range("horizon", self.horizon, self.horizon > 0.0 && self.horizon.is_finite(), "(0, inf)")?;
        ensure_range("t_star", self.t_star, self.t_star > 0.0, "(0, inf)")?;
        ensure_range("t_burn", self.t_burn, self.t_burn > 0.0, "(0, inf)")?;
        ensure_range("grid_step", self.grid_step, self.grid_step > 0.0, "(0, inf)")?;
        ensure_range("grid_radius", self.grid_radius, self.grid_radius > 0.0, "(0, inf)")?;
        if self.n_paths == 0 || self.bins == 0 || self.n_trials == 0 || self.max_steps == 0 || self.n_kernel == 0 {
            return Err(ErgoError::Config("n_paths, bins, n_trials, max_steps and n_kernel must be positive".into()));
        }
        if self.depth == 0 {
            return Err(ErgoError::Config("depth must be at least 1".into()));
        }
        if self.x0.is_empty() {
            self.x0 = (0..d).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        }
        if self.y0.is_empty() {
            self.y0 = self.x0.iter().map(|v| -v).collect();
        }
        check_point(&self.x0, d, "x0")?;
        check_point(&self.y0, d, "y0")?;
        if self.times.is_empty() {
            self.times = (0..=28).map(|i| 1.0 + 0.25 * f64::from(i)).collect();
        }
        if self.projection.iter().any(|c| *c >= d) {
            return Err(ErgoError::Config(format!("projection {:?} exceeds dimension {d}", self.projection)));
        }
        if self.lyapunov == LyapunovChoice::Auto {
            self.lyapunov =
                if self.model.name == ModelName::ExampleE1 { LyapunovChoice::E1 } else { LyapunovChoice::Quadratic };
        }
        if self.lyapunov == LyapunovChoice::E1 && d != 2 {
            return Err(ErgoError::Config("the e1 Lyapunov function needs dimension 2".into()));
        }
        if self.grid.is_empty() {
            self.grid = box_grid(d, self.grid_radius, self.grid_step)?;
        }
        for p in &self.grid {
            check_point(p, d, "grid point")?;
        }
        if self.t_chain.is_none() {
            let k = model.dissipativity_k.unwrap_or(self.model.k);
            ensure_range("k", k, k > 0.0, "(0, inf)")?;
            self.t_chain = Some(3.0 / k);
        }
        if self.starts.is_empty() {
            self.starts = vec![self.x0.clone(), self.y0.clone()];
        }
        for p in &self.starts {
            check_point(p, d, "start")?;
        }
        Ok(self)
    }

    pub fn lyapunov_spec(&self) -> LyapunovSpec {
        match self.lyapunov {
            LyapunovChoice::E1 => LyapunovSpec::e1(self.t_star),
            _ => LyapunovSpec::quadratic(self.t_star),
        }
    }

    pub fn histogram(&self) -> HistogramSpec {
        HistogramSpec { bins: self.bins, range: self.hist_range, bootstrap: self.bootstrap, seed: self.seed }
    }

    pub fn projection(&self) -> Option<Vec<usize>> {
        (!self.projection.is_empty()).then(|| self.projection.clone())
    }

    pub fn tv_params(&self) -> TvDecayParams {
        TvDecayParams {
            times: self.times.clone(),
            n_paths: self.n_paths,
            dt: self.dt,
            hist: self.histogram(),
            projection: self.projection(),
            method: self.tv_method,
        }
    }

    pub fn chain_params(&self) -> ChainParams {
        ChainParams {
            t_chain: self.t_chain.unwrap_or(3.0),
            r_star: self.r_star,
            delta: self.delta,
            max_steps: self.max_steps,
            n_trials: self.n_trials,
            dt: self.dt,
            n_kernel: self.n_kernel,
            bins: self.bins,
        }
    }

    pub fn chain_options(&self) -> ChainOptions {
        ChainOptions {
            mode: self.derivative_mode,
            fd_step: self.fd_step,
            sv_tol: self.sv_tol,
            strict_paper_columns: self.strict_paper_columns,
        }
    }
}

/// Lattice `{-r, -r + s, .., r}^d`.
pub fn box_grid(d: usize, radius: f64, step: f64) -> Result<Vec<Vec<f64>>> {
    let n = (radius / step).floor() as i64;
    let per_axis = (2 * n + 1) as usize;
    if per_axis.checked_pow(d as u32).is_none_or(|c| c > 100_000) {
        return Err(ErgoError::Config("grid_radius / grid_step gives more than 1e5 points".into()));
    }
    let axis: Vec<f64> = (-n..=n).map(|i| i as f64 * step).collect();
    let mut out: Vec<Vec<f64>> = vec![vec![]];
    for _ in 0..d {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |a| {
                    let mut q = p.clone();
                    q.push(*a);
                    q
                })
            })
            .collect();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "experiment = \"tv-decay\"\n[model]\nname = \"example-e1\"\n";

    #[test]
    fn minimal_document_resolves() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.experiment, Some(Experiment::TvDecay));
        assert_eq!(c.x0, vec![1.0, 0.0]);
        assert_eq!(c.y0, vec![-1.0, 0.0]);
        assert_eq!(c.times.len(), 29);
        assert_eq!(c.times[28], 8.0);
        assert_eq!(c.lyapunov, LyapunovChoice::E1);
        assert_eq!(c.t_chain, Some(3.0));
        assert_eq!(c.grid.len(), 81);
        assert_eq!(c.resolve().unwrap(), parse_config(MINIMAL).unwrap());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config(&format!("dtt = 0.1\n{MINIMAL}")).unwrap_err().to_string();
        assert!(err.contains("dtt"), "{err}");
        let err = parse_config("experiment = \"simulate\"\n[model]\nname = \"example-e1\"\nkk = 1\n").unwrap_err();
        assert!(err.to_string().contains("kk"));
    }

    #[test]
    fn missing_experiment_is_an_error() {
        let err = parse_config("[model]\nname = \"example-e1\"\n").unwrap_err().to_string();
        assert!(err.contains("experiment"), "{err}");
    }

    #[test]
    fn missing_model_is_an_error() {
        let err = parse_config("experiment = \"simulate\"\n").unwrap_err().to_string();
        assert!(err.contains("model"), "{err}");
    }

    #[test]
    fn alpha_out_of_range() {
        let doc = "experiment = \"orey-check\"\n[model]\nname = \"levy-dissipative\"\n[levy]\nalpha_index = 2.5\n";
        let err = parse_config(doc).unwrap_err();
        assert!(matches!(&err, ErgoError::Range { name, .. } if name == "alpha_index"));
        assert!(err.to_string().contains("(0, 2)"));
    }

    #[test]
    fn emitted_config_parses_back() {
        let c = parse_config(MINIMAL).unwrap();
        let text = emit_config(&c).unwrap();
        assert_eq!(parse_config(&text).unwrap(), c);
    }

    #[test]
    fn linear_and_polynomial_models() {
        let doc = "experiment = \"simulate\"\n[model]\nname = \"linear\"\ndrift_matrix = [[-1.0, 0.0], [0.0, -2.0]]\n";
        let m = parse_config(doc).unwrap().build_model().unwrap();
        assert_eq!(m.dissipativity_k, Some(1.0));
        let doc = "experiment = \"simulate\"\n[model]\nname = \"polynomial\"\n[[model.terms]]\ncomponent = 0\ncoeff = -1.0\npowers = [3]\n";
        let c = parse_config(doc).unwrap();
        assert_eq!(c.model.dim, 1);
        let doc = "experiment = \"drift-check\"\n[model]\nname = \"brownian\"\ndim = 2\n";
        assert_eq!(parse_config(doc).unwrap().build_model().unwrap().dim(), 2);
    }
}
