//! The matrix recursion
//!
//! ```text
//! B_0 = I,  B_n = b·∇B_{n-1} − ∇b·B_{n-1} + ½ ∇²_{A1 A1ᵀ} B_{n-1}
//! ```
//!
//! and the rank test on `[A1, B_1 A1, …, B_n A1, A2, B_1 A2, …, B_n A2]`.
//! Polynomial drifts are handled symbolically; anything else goes through
//! memoized finite differences on a lattice around `x`.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ErgoError, Result};
use crate::model::{PolyTerm, SdeModel};

/// Finite-difference chains deeper than this get a precision warning.
pub const FD_WARN_DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DerivativeMode {
    /// Symbolic recursion for polynomial drifts; otherwise the supplied
    /// Jacobian with lattice differences for the chain.
    #[default]
    ExactSupplied,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOptions {
    pub mode: DerivativeMode,
    /// Absolute lattice step, scaled by `max(1, |x_i|)` per coordinate.
    pub fd_step: f64,
    /// Relative singular-value threshold.
    pub sv_tol: f64,
    /// Drop the `B_1 A2` block.
    pub strict_paper_columns: bool,
}

impl Default for ChainOptions {
    fn default() -> Self {
        ChainOptions { mode: DerivativeMode::ExactSupplied, fd_step: 1e-4, sv_tol: 1e-8, strict_paper_columns: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Evaluation {
    Symbolic,
    JacobianLattice,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BracketChain {
    pub x: Vec<f64>,
    pub depth: usize,
    /// `B_0 ..= B_depth`.
    pub matrices: Vec<DMatrix<f64>>,
    pub assembled: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub sv_tol: f64,
    pub evaluation: Evaluation,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankVerdict {
    pub satisfied: bool,
    pub rank: usize,
    pub singular_values: Vec<f64>,
}

/// Singular values sorted descending and the count above
/// `sv_tol * largest`.
pub fn numeric_rank(m: &DMatrix<f64>, sv_tol: f64) -> (usize, Vec<f64>) {
    if m.ncols() == 0 || m.nrows() == 0 {
        return (0, vec![]);
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().cloned().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let top = sv.first().copied().unwrap_or(0.0);
    let rank = if top > 0.0 { sv.iter().filter(|s| **s > sv_tol * top).count() } else { 0 };
    (rank, sv)
}

// ---------------------------------------------------------------------------
// symbolic path

type Poly = BTreeMap<Vec<u32>, f64>;

fn poly_add(acc: &mut Poly, p: &Poly, scale: f64) {
    if scale == 0.0 {
        return;
    }
    for (m, c) in p {
        let e = acc.entry(m.clone()).or_insert(0.0);
        *e += scale * c;
        if *e == 0.0 {
            acc.remove(m);
        }
    }
}

fn poly_mul(a: &Poly, b: &Poly) -> Poly {
    let mut out = Poly::new();
    for (ma, ca) in a {
        for (mb, cb) in b {
            let m: Vec<u32> = ma.iter().zip(mb).map(|(x, y)| x + y).collect();
            let e = out.entry(m.clone()).or_insert(0.0);
            *e += ca * cb;
            if *e == 0.0 {
                out.remove(&m);
            }
        }
    }
    out
}

fn poly_deriv(p: &Poly, l: usize) -> Poly {
    let mut out = Poly::new();
    for (m, c) in p {
        if m[l] > 0 {
            let mut m2 = m.clone();
            m2[l] -= 1;
            *out.entry(m2).or_insert(0.0) += c * f64::from(m[l]);
        }
    }
    out
}

fn poly_eval(p: &Poly, x: &[f64]) -> f64 {
    p.iter().map(|(m, c)| c * x.iter().zip(m).map(|(xi, e)| xi.powi(*e as i32)).product::<f64>()).sum()
}

type PolyMat = Vec<Vec<Poly>>;

fn symbolic_chain(terms: &[PolyTerm], q: &DMatrix<f64>, d: usize, depth: usize) -> Vec<PolyMat> {
    let mut b: Vec<Poly> = vec![Poly::new(); d];
    for t in terms {
        let e = b[t.component].entry(t.powers.clone()).or_insert(0.0);
        *e += t.coeff;
    }
    let jac: PolyMat = (0..d).map(|i| (0..d).map(|j| poly_deriv(&b[i], j)).collect()).collect();
    let mut identity: PolyMat = vec![vec![Poly::new(); d]; d];
    for (i, row) in identity.iter_mut().enumerate() {
        row[i].insert(vec![0; d], 1.0);
    }
    let mut chain = vec![identity];
    for _ in 0..depth {
        let prev = chain.last().unwrap();
        let mut next: PolyMat = vec![vec![Poly::new(); d]; d];
        for i in 0..d {
            for j in 0..d {
                let m = &prev[i][j];
                let acc = &mut next[i][j];
                for (l, bl) in b.iter().enumerate() {
                    poly_add(acc, &poly_mul(bl, &poly_deriv(m, l)), 1.0);
                }
                for (r, jr) in jac[i].iter().enumerate() {
                    poly_add(acc, &poly_mul(jr, &prev[r][j]), -1.0);
                }
                for p in 0..d {
                    for qq in 0..d {
                        if q[(p, qq)] != 0.0 {
                            poly_add(acc, &poly_deriv(&poly_deriv(m, p), qq), 0.5 * q[(p, qq)]);
                        }
                    }
                }
            }
        }
        chain.push(next);
    }
    chain
}

// ---------------------------------------------------------------------------
// lattice path

struct Lattice<'a> {
    model: &'a SdeModel,
    x: Vec<f64>,
    h: Vec<f64>,
    q_pairs: Vec<(usize, usize, f64)>,
    exact_jacobian: bool,
    drift_memo: HashMap<Vec<i32>, Vec<f64>>,
    chain_memo: HashMap<(usize, Vec<i32>), DMatrix<f64>>,
}

impl Lattice<'_> {
    fn point(&self, off: &[i32]) -> Vec<f64> {
        self.x.iter().zip(off).zip(&self.h).map(|((x, o), h)| x + f64::from(*o) * h).collect()
    }

    fn shifted(off: &[i32], moves: &[(usize, i32)]) -> Vec<i32> {
        let mut o = off.to_vec();
        for (c, s) in moves {
            o[*c] += s;
        }
        o
    }

    fn drift(&mut self, off: &[i32]) -> Vec<f64> {
        if let Some(v) = self.drift_memo.get(off) {
            return v.clone();
        }
        let mut out = vec![0.0; self.x.len()];
        self.model.drift.eval_into(&self.point(off), &mut out);
        self.drift_memo.insert(off.to_vec(), out.clone());
        out
    }

    fn jacobian(&mut self, off: &[i32]) -> DMatrix<f64> {
        let d = self.x.len();
        if self.exact_jacobian {
            let p = self.point(off);
            return (self.model.drift.exact_jacobian.as_ref().unwrap())(&p);
        }
        let mut j = DMatrix::zeros(d, d);
        for l in 0..d {
            let fp = self.drift(&Self::shifted(off, &[(l, 1)]));
            let fm = self.drift(&Self::shifted(off, &[(l, -1)]));
            for i in 0..d {
                j[(i, l)] = (fp[i] - fm[i]) / (2.0 * self.h[l]);
            }
        }
        j
    }

    fn chain(&mut self, n: usize, off: &[i32]) -> DMatrix<f64> {
        let d = self.x.len();
        if n == 0 {
            return DMatrix::identity(d, d);
        }
        if let Some(m) = self.chain_memo.get(&(n, off.to_vec())) {
            return m.clone();
        }
        let prev = self.chain(n - 1, off);
        let b = self.drift(off);
        let mut out = -self.jacobian(off) * &prev;
        for l in 0..d {
            if b[l] != 0.0 {
                let p = self.chain(n - 1, &Self::shifted(off, &[(l, 1)]));
                let m = self.chain(n - 1, &Self::shifted(off, &[(l, -1)]));
                out += (p - m) * (b[l] / (2.0 * self.h[l]));
            }
        }
        for (p, q, w) in self.q_pairs.clone() {
            let second = if p == q {
                let a = self.chain(n - 1, &Self::shifted(off, &[(p, 1)]));
                let c = self.chain(n - 1, &Self::shifted(off, &[(p, -1)]));
                (a + c - &prev * 2.0) / (self.h[p] * self.h[p])
            } else {
                let pp = self.chain(n - 1, &Self::shifted(off, &[(p, 1), (q, 1)]));
                let pm = self.chain(n - 1, &Self::shifted(off, &[(p, 1), (q, -1)]));
                let mp = self.chain(n - 1, &Self::shifted(off, &[(p, -1), (q, 1)]));
                let mm = self.chain(n - 1, &Self::shifted(off, &[(p, -1), (q, -1)]));
                (pp - pm - mp + mm) / (4.0 * self.h[p] * self.h[q])
            };
            out += second * (0.5 * w);
        }
        self.chain_memo.insert((n, off.to_vec()), out.clone());
        out
    }
}

// ---------------------------------------------------------------------------

/// Assemble the rank-test matrix from a chain.
fn assemble(model: &SdeModel, matrices: &[DMatrix<f64>], strict: bool) -> DMatrix<f64> {
    let mut blocks: Vec<DMatrix<f64>> = matrices.iter().map(|b| b * &model.a1).collect();
    if model.levy.is_some() {
        for (n, b) in matrices.iter().enumerate() {
            if strict && n == 1 {
                continue;
            }
            blocks.push(b * &model.a2);
        }
    }
    let d = model.dim();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(d, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (d, b.ncols())).copy_from(&b);
        c += b.ncols();
    }
    out
}

/// `B_0 ..= B_depth` at `x` and the assembled rank-test matrix. The `A2`
/// blocks are included only for models with a jump part.
pub fn bn_chain(model: &SdeModel, x: &[f64], depth: usize, opts: &ChainOptions) -> Result<BracketChain> {
    let d = model.dim();
    if depth == 0 {
        return Err(ErgoError::Input("depth must be at least 1".into()));
    }
    if x.len() != d || x.iter().any(|v| !v.is_finite()) {
        return Err(ErgoError::Input(format!("point {x:?} is not a finite point of dimension {d}")));
    }
    let q = &model.a1 * model.a1.transpose();
    let mut warnings = Vec::new();
    let (matrices, evaluation) = match (opts.mode, &model.drift.polynomial_form) {
        (DerivativeMode::ExactSupplied, Some(terms)) => {
            let chain = symbolic_chain(terms, &q, d, depth);
            let m = chain.iter().map(|pm| DMatrix::from_fn(d, d, |i, j| poly_eval(&pm[i][j], x))).collect();
            (m, Evaluation::Symbolic)
        }
        (mode, _) => {
            let exact_jacobian = mode == DerivativeMode::ExactSupplied;
            if exact_jacobian && model.drift.exact_jacobian.is_none() {
                return Err(ErgoError::Config(format!(
                    "model '{}' supplies no exact derivatives; use finite-difference mode",
                    model.name
                )));
            }
            if opts.fd_step <= 0.0 {
                return Err(ErgoError::Range { name: "fd_step".into(), value: opts.fd_step, range: "(0, inf)".into() });
            }
            if depth > FD_WARN_DEPTH {
                warnings.push(format!(
                    "finite-difference depth {depth} > {FD_WARN_DEPTH}: rounding error grows like h^-2 per level"
                ));
            }
            let mut q_pairs = Vec::new();
            for p in 0..d {
                for qq in 0..d {
                    if q[(p, qq)] != 0.0 {
                        q_pairs.push((p, qq, q[(p, qq)]));
                    }
                }
            }
            let mut lat = Lattice {
                model,
                x: x.to_vec(),
                h: x.iter().map(|v| opts.fd_step * v.abs().max(1.0)).collect(),
                q_pairs,
                exact_jacobian,
                drift_memo: HashMap::new(),
                chain_memo: HashMap::new(),
            };
            let origin = vec![0; d];
            let m = (0..=depth).map(|n| lat.chain(n, &origin)).collect();
            let ev = if exact_jacobian { Evaluation::JacobianLattice } else { Evaluation::FiniteDifference };
            (m, ev)
        }
    };
    let matrices: Vec<DMatrix<f64>> = matrices;
    for (n, m) in matrices.iter().enumerate() {
        if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
            return Err(ErgoError::Evaluation { what: format!("B_{n}"), coordinate: pos % d });
        }
    }
    let assembled = assemble(model, &matrices, opts.strict_paper_columns);
    let (rank, singular_values) = numeric_rank(&assembled, opts.sv_tol);
    Ok(BracketChain {
        x: x.to_vec(),
        depth,
        matrices,
        assembled,
        singular_values,
        rank,
        sv_tol: opts.sv_tol,
        evaluation,
        warnings,
    })
}

/// Whether the assembled columns span `R^d`.
pub fn rank_condition(chain: &BracketChain, d: usize) -> RankVerdict {
    RankVerdict { satisfied: chain.rank == d, rank: chain.rank, singular_values: chain.singular_values.clone() }
}

/// Rank of the controllability matrix `[A, BA, …, B^{d-1}A]`.
pub fn kalman_rank_oracle(b: &DMatrix<f64>, a: &DMatrix<f64>, sv_tol: f64) -> Result<usize> {
    let d = b.nrows();
    if b.ncols() != d || a.nrows() != d {
        return Err(ErgoError::Input("kalman oracle needs square B and A with matching rows".into()));
    }
    let m = a.ncols();
    let mut k = DMatrix::zeros(d, d * m);
    let mut block = a.clone();
    for n in 0..d {
        k.view_mut((0, n * m), (d, m)).copy_from(&block);
        block = b * block;
    }
    Ok(numeric_rank(&k, sv_tol).0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankRow {
    pub point: Vec<f64>,
    pub depth: usize,
    pub rank: usize,
    pub satisfied: bool,
}

/// Rank verdicts over a list of points.
pub fn rank_grid(model: &SdeModel, points: &[Vec<f64>], depth: usize, opts: &ChainOptions) -> Result<Vec<RankRow>> {
    points
        .iter()
        .map(|p| {
            let c = bn_chain(model, p, depth, opts)?;
            let v = rank_condition(&c, model.dim());
            Ok(RankRow { point: p.clone(), depth, rank: v.rank, satisfied: v.satisfied })
        })
        .collect()
}

/// CSV with `x1..xd,depth,rank,satisfied`.
pub fn write_rank_csv<W: Write>(rows: &[RankRow], mut w: W) -> std::io::Result<()> {
    let d = rows.first().map_or(0, |r| r.point.len());
    let coords: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    writeln!(w, "{},depth,rank,satisfied", coords.join(","))?;
    for r in rows {
        let p: Vec<String> = r.point.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{},{},{}", p.join(","), r.depth, r.rank, r.satisfied)?;
    }
    Ok(())
}
