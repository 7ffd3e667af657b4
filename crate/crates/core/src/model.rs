//! SDE models `dX = b(X) dt + A1 dW + A2 dL` with constant noise matrices,
//! plus Lyapunov functions used by the drift checks.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ErgoError, Result};
use crate::noise::LevyMeasureSpec;

/// Writes `b(x)` into the output slice.
pub type VectorMap = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type MatrixMap = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
pub type ScalarMap = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct DriftField {
    pub dim: usize,
    pub eval: VectorMap,
    pub exact_jacobian: Option<MatrixMap>,
    /// Coefficient table when the drift is a polynomial; enables exact
    /// bracket chains.
    pub polynomial_form: Option<Arc<Vec<PolyTerm>>>,
    /// Relative central-difference step.
    pub fd_step: f64,
}

impl fmt::Debug for DriftField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftField")
            .field("dim", &self.dim)
            .field("exact_jacobian", &self.exact_jacobian.is_some())
            .field("polynomial_form", &self.polynomial_form.is_some())
            .field("fd_step", &self.fd_step)
            .finish()
    }
}

impl DriftField {
    pub fn new(dim: usize, eval: VectorMap) -> Self {
        DriftField { dim, eval, exact_jacobian: None, polynomial_form: None, fd_step: 1e-5 }
    }

    pub fn with_jacobian(mut self, jac: MatrixMap) -> Self {
        self.exact_jacobian = Some(jac);
        self
    }

    /// Record the coefficient table; the caller guarantees it matches `eval`.
    pub fn with_polynomial_form(mut self, terms: Vec<PolyTerm>) -> Self {
        self.polynomial_form = Some(Arc::new(terms));
        self
    }

    /// Evaluate without checks; for inner loops that already validated `x`.
    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (self.eval)(x, out)
    }

    /// Central finite-difference Jacobian with per-coordinate step
    /// `fd_step * max(1, |x_i|)`.
    pub fn fd_jacobian(&self, x: &[f64], fd_step: f64) -> DMatrix<f64> {
        let d = self.dim;
        let mut jac = DMatrix::zeros(d, d);
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; d];
        let mut fm = vec![0.0; d];
        for j in 0..d {
            let h = fd_step * x[j].abs().max(1.0);
            xp[j] = x[j] + h;
            self.eval_into(&xp, &mut fp);
            xp[j] = x[j] - h;
            self.eval_into(&xp, &mut fm);
            xp[j] = x[j];
            for i in 0..d {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac
    }
}

/// Coordinates whose marginal law is an autonomous Ornstein–Uhlenbeck
/// process `dZ = -k Z dt + sigma dW`, known in closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuMarginal {
    pub k: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug)]
pub struct SdeModel {
    pub name: String,
    pub drift: DriftField,
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub levy: Option<LevyMeasureSpec>,
    pub dissipativity_k: Option<f64>,
    /// Per-coordinate closed-form marginals, where they exist.
    pub ou_marginals: Vec<Option<OuMarginal>>,
}

/// One monomial `coeff * prod x_j^powers[j]` in drift component `component`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyTerm {
    pub component: usize,
    pub coeff: f64,
    pub powers: Vec<u32>,
}

impl SdeModel {
    pub fn new(name: &str, drift: DriftField, a1: DMatrix<f64>, a2: DMatrix<f64>) -> Result<Self> {
        let d = drift.dim;
        if d == 0 {
            return Err(ErgoError::Config("model dimension must be positive".into()));
        }
        for (label, m) in [("a1", &a1), ("a2", &a2)] {
            if m.nrows() != d || m.ncols() != d {
                return Err(ErgoError::Config(format!(
                    "{label} is {}x{}, drift dimension is {d}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        Ok(SdeModel {
            name: name.to_string(),
            drift,
            a1,
            a2,
            levy: None,
            dissipativity_k: None,
            ou_marginals: vec![None; d],
        })
    }

    pub fn with_levy(mut self, levy: LevyMeasureSpec) -> Result<Self> {
        if levy.dim != self.dim() {
            return Err(ErgoError::Config(format!(
                "levy dimension {} differs from model dimension {}",
                levy.dim,
                self.dim()
            )));
        }
        self.levy = Some(levy);
        Ok(self)
    }

    pub fn with_dissipativity(mut self, k: f64) -> Self {
        self.dissipativity_k = Some(k);
        self
    }

    pub fn dim(&self) -> usize {
        self.drift.dim
    }

    /// The two-dimensional example `dX = (Y^2 - kX) dt`, `dY = -kY dt + sigma dW`.
    /// Its `Y` coordinate is an autonomous OU process.
    pub fn example_e1(k: f64, sigma: f64) -> Result<Self> {
        if !(k > 0.0) {
            return Err(ErgoError::Range { name: "k".into(), value: k, range: "(0, inf)".into() });
        }
        if sigma == 0.0 || !sigma.is_finite() {
            return Err(ErgoError::Range { name: "sigma".into(), value: sigma, range: "nonzero finite".into() });
        }
        let eval: VectorMap = Arc::new(move |x: &[f64], out: &mut [f64]| {
            out[0] = x[1] * x[1] - k * x[0];
            out[1] = -k * x[1];
        });
        let jac: MatrixMap = Arc::new(move |x: &[f64]| DMatrix::from_row_slice(2, 2, &[-k, 2.0 * x[1], 0.0, -k]));
        let mut a1 = DMatrix::zeros(2, 2);
        a1[(1, 1)] = sigma;
        let poly = vec![
            PolyTerm { component: 0, coeff: 1.0, powers: vec![0, 2] },
            PolyTerm { component: 0, coeff: -k, powers: vec![1, 0] },
            PolyTerm { component: 1, coeff: -k, powers: vec![0, 1] },
        ];
        let drift = DriftField::new(2, eval).with_jacobian(jac).with_polynomial_form(poly);
        let mut m = SdeModel::new("example-e1", drift, a1, DMatrix::zeros(2, 2))?;
        m.ou_marginals[1] = Some(OuMarginal { k, sigma });
        Ok(m)
    }

    /// Linear drift `b(x) = Bx` with Brownian coefficient `a1`.
    pub fn linear(b: DMatrix<f64>, a1: DMatrix<f64>) -> Result<Self> {
        let d = b.nrows();
        if b.ncols() != d {
            return Err(ErgoError::Config("drift matrix must be square".into()));
        }
        let bm = b.clone();
        let eval: VectorMap = Arc::new(move |x: &[f64], out: &mut [f64]| {
            for i in 0..d {
                let mut s = 0.0;
                for j in 0..d {
                    s += bm[(i, j)] * x[j];
                }
                out[i] = s;
            }
        });
        let bj = b.clone();
        let jac: MatrixMap = Arc::new(move |_x: &[f64]| bj.clone());
        let mut poly = Vec::new();
        for i in 0..d {
            for j in 0..d {
                if b[(i, j)] != 0.0 {
                    let mut powers = vec![0; d];
                    powers[j] = 1;
                    poly.push(PolyTerm { component: i, coeff: b[(i, j)], powers });
                }
            }
        }
        let drift = DriftField::new(d, eval).with_jacobian(jac).with_polynomial_form(poly);
        let mut m = SdeModel::new("linear", drift, a1.clone(), DMatrix::zeros(d, d))?;
        let diagonal = |mat: &DMatrix<f64>| (0..d).all(|i| (0..d).all(|j| i == j || mat[(i, j)] == 0.0));
        if diagonal(&b) && diagonal(&a1) {
            for i in 0..d {
                if b[(i, i)] < 0.0 {
                    m.ou_marginals[i] = Some(OuMarginal { k: -b[(i, i)], sigma: a1[(i, i)] });
                }
            }
        }
        let sym = (&b + b.transpose()) * 0.5;
        let lmax = sym.symmetric_eigenvalues().max();
        if lmax < 0.0 {
            m.dissipativity_k = Some(-lmax);
        }
        Ok(m)
    }

    /// Two-dimensional pure-jump model with drift
    /// `b(x) = -k x + omega J x - cubic * (x1^3, x2^3)`, `J` the rotation
    /// generator. The rotation part is skew and the cubic part monotone, so
    /// the one-sided Lipschitz rate is exactly `k`.
    pub fn levy_dissipative(k: f64, omega: f64, cubic: f64, levy: LevyMeasureSpec) -> Result<Self> {
        if !(k > 0.0) {
            return Err(ErgoError::Range { name: "k".into(), value: k, range: "(0, inf)".into() });
        }
        if cubic < 0.0 {
            return Err(ErgoError::Range { name: "cubic".into(), value: cubic, range: "[0, inf)".into() });
        }
        let eval: VectorMap = Arc::new(move |x: &[f64], out: &mut [f64]| {
            out[0] = -k * x[0] - omega * x[1] - cubic * x[0] * x[0] * x[0];
            out[1] = -k * x[1] + omega * x[0] - cubic * x[1] * x[1] * x[1];
        });
        let jac: MatrixMap = Arc::new(move |x: &[f64]| {
            DMatrix::from_row_slice(
                2,
                2,
                &[-k - 3.0 * cubic * x[0] * x[0], -omega, omega, -k - 3.0 * cubic * x[1] * x[1]],
            )
        });
        let term = |component, coeff, powers: [u32; 2]| PolyTerm { component, coeff, powers: powers.to_vec() };
        let poly = vec![
            term(0, -k, [1, 0]),
            term(0, -omega, [0, 1]),
            term(0, -cubic, [3, 0]),
            term(1, -k, [0, 1]),
            term(1, omega, [1, 0]),
            term(1, -cubic, [0, 3]),
        ];
        let drift = DriftField::new(2, eval).with_jacobian(jac).with_polynomial_form(poly);
        Ok(SdeModel::new("levy-dissipative", drift, DMatrix::zeros(2, 2), DMatrix::identity(2, 2))?
            .with_levy(levy)?
            .with_dissipativity(k))
    }

    /// Polynomial drift from a coefficient table; the Jacobian is assembled
    /// term by term.
    pub fn polynomial(dim: usize, terms: Vec<PolyTerm>, a1: DMatrix<f64>, a2: DMatrix<f64>) -> Result<Self> {
        for t in &terms {
            if t.component >= dim || t.powers.len() != dim {
                return Err(ErgoError::Config(format!("polynomial term {t:?} does not fit dimension {dim}")));
            }
        }
        let form = terms.clone();
        let terms = Arc::new(terms);
        let te = Arc::clone(&terms);
        let eval: VectorMap = Arc::new(move |x: &[f64], out: &mut [f64]| {
            out.iter_mut().for_each(|o| *o = 0.0);
            for t in te.iter() {
                let mut v = t.coeff;
                for (xj, &p) in x.iter().zip(&t.powers) {
                    v *= xj.powi(p as i32);
                }
                out[t.component] += v;
            }
        });
        let tj = Arc::clone(&terms);
        let jac: MatrixMap = Arc::new(move |x: &[f64]| {
            let mut m = DMatrix::zeros(dim, dim);
            for t in tj.iter() {
                for l in 0..dim {
                    if t.powers[l] == 0 {
                        continue;
                    }
                    let mut v = t.coeff * f64::from(t.powers[l]);
                    for (j, (&xj, &p)) in x.iter().zip(&t.powers).enumerate() {
                        let e = if j == l { p - 1 } else { p };
                        v *= xj.powi(e as i32);
                    }
                    m[(t.component, l)] += v;
                }
            }
            m
        });
        let drift = DriftField::new(dim, eval).with_jacobian(jac).with_polynomial_form(form);
        SdeModel::new("polynomial", drift, a1, a2)
    }
}

fn check_point(model: &SdeModel, x: &[f64]) -> Result<()> {
    if x.len() != model.dim() {
        return Err(ErgoError::Config(format!("point has length {}, model dimension is {}", x.len(), model.dim())));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(ErgoError::Input(format!("point coordinate {i} is not finite")));
    }
    Ok(())
}

pub fn eval_drift(model: &SdeModel, x: &[f64]) -> Result<Vec<f64>> {
    check_point(model, x)?;
    let mut out = vec![0.0; model.dim()];
    model.drift.eval_into(x, &mut out);
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(ErgoError::Evaluation { what: "drift".into(), coordinate: i });
    }
    Ok(out)
}

/// `(grad b)_{ij} = d b^i / d x_j`: the supplied exact Jacobian when present,
/// central differences otherwise.
pub fn jacobian(model: &SdeModel, x: &[f64]) -> Result<DMatrix<f64>> {
    check_point(model, x)?;
    let j = match &model.drift.exact_jacobian {
        Some(f) => f(x),
        None => model.drift.fd_jacobian(x, model.drift.fd_step),
    };
    finite_matrix(&j, "jacobian")?;
    Ok(j)
}

pub(crate) fn finite_matrix(m: &DMatrix<f64>, what: &str) -> Result<()> {
    match m.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(ErgoError::Evaluation { what: what.into(), coordinate: i }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DissipativityReport {
    pub worst_ratio: f64,
    pub worst_pair: (Vec<f64>, Vec<f64>),
    pub k_declared: f64,
    pub passed: bool,
    /// Set when the check fails: the pair achieving the worst ratio.
    pub violating: Option<(Vec<f64>, Vec<f64>)>,
}

/// Evaluate `<x-y, b(x)-b(y)> / |x-y|^2` on every pair and compare the
/// maximum against `-k_declared + tolerance`.
pub fn check_dissipativity(
    model: &SdeModel,
    pairs: &[(Vec<f64>, Vec<f64>)],
    k_declared: f64,
    tolerance: f64,
) -> Result<DissipativityReport> {
    if pairs.is_empty() {
        return Err(ErgoError::Input("no sample pairs supplied".into()));
    }
    let mut worst = f64::NEG_INFINITY;
    let mut worst_pair = None;
    for (x, y) in pairs {
        let bx = eval_drift(model, x)?;
        let by = eval_drift(model, y)?;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..x.len() {
            let dx = x[i] - y[i];
            num += dx * (bx[i] - by[i]);
            den += dx * dx;
        }
        if den == 0.0 {
            return Err(ErgoError::Input(format!("pair with x = y = {x:?}")));
        }
        let r = num / den;
        if r > worst {
            worst = r;
            worst_pair = Some((x.clone(), y.clone()));
        }
    }
    let worst_pair = worst_pair.expect("nonempty pairs");
    let passed = worst <= -k_declared + tolerance;
    Ok(DissipativityReport {
        worst_ratio: worst,
        violating: (!passed).then(|| worst_pair.clone()),
        worst_pair,
        k_declared,
        passed,
    })
}

/// A Lyapunov function `V >= 1` with its drift time `t_star`.
#[derive(Clone)]
pub struct LyapunovSpec {
    pub v_eval: ScalarMap,
    pub t_star: f64,
    pub description: String,
}

impl fmt::Debug for LyapunovSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LyapunovSpec").field("t_star", &self.t_star).field("description", &self.description).finish()
    }
}

impl LyapunovSpec {
    /// Lift a nonnegative function `v0` to `1 + v0`.
    pub fn lifted(v0: ScalarMap, t_star: f64, description: &str) -> Self {
        LyapunovSpec {
            v_eval: Arc::new(move |x: &[f64]| 1.0 + v0(x)),
            t_star,
            description: format!("1 + {description}"),
        }
    }

    /// `V(x) = 1 + |x|^2`.
    pub fn quadratic(t_star: f64) -> Self {
        Self::lifted(Arc::new(|x: &[f64]| x.iter().map(|v| v * v).sum()), t_star, "|x|^2")
    }

    /// `V(x, y) = 1 + |x| + |y|^2`, the natural choice for the example-e1 model.
    pub fn e1(t_star: f64) -> Self {
        Self::lifted(Arc::new(|p: &[f64]| p[0].abs() + p[1] * p[1]), t_star, "|x| + |y|^2")
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.v_eval)(x)
    }
}
