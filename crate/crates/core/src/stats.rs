//! Small numeric helpers shared by the estimators: moments, normal CDF,
//! least squares, two-sample KS, adaptive quadrature and a shared-box
//! histogram binning.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{ErgoError, Result};

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two samples.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    (mean(xs), (variance(xs) / xs.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
}

/// Weighted least squares of `y` against `x`. Unit weights give ordinary
/// least squares with the residual-based slope standard error.
pub fn weighted_line_fit(x: &[f64], y: &[f64], w: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n || w.len() != n {
        return Err(ErgoError::Input(format!("line fit needs >= 2 matched points, got {n}")));
    }
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        sxx += w[i] * (x[i] - mx) * (x[i] - mx);
        sxy += w[i] * (x[i] - mx) * (y[i] - my);
    }
    if sxx <= 0.0 {
        return Err(ErgoError::Numeric("line fit abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if n > 2 {
        let rss: f64 = (0..n).map(|i| w[i] * (y[i] - intercept - slope * x[i]).powi(2)).sum();
        (rss / (n - 2) as f64 / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LineFit { slope, intercept, slope_se })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d;
    KsResult { statistic: d, p_value: kolmogorov_q(lambda) }
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let term = sign * 2.0 * (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-14 {
            break;
        }
        sign = -sign;
    }
    sum.clamp(0.0, 1.0)
}

/// Adaptive Simpson quadrature. Returns the value and the accumulated
/// error estimate; fails if the error estimate exceeds `tol` after the
/// depth budget is spent.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<(f64, f64)> {
    const MAX_DEPTH: u32 = 48;
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
        err: &mut f64,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            *err += delta.abs() / 15.0;
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1, err)
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1, err)
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let mut err = 0.0;
    let v = recurse(&f, a, b, fa, fm, fb, whole, tol, MAX_DEPTH, &mut err);
    if !v.is_finite() || err > tol * 10.0 {
        return Err(ErgoError::Quadrature { achieved: err, requested: tol });
    }
    Ok((v, err))
}

/// Histogram settings for TV estimates and binned kernel couplings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistogramSpec {
    /// Bins per coordinate.
    pub bins: usize,
    /// Fixed `[lo, hi]` for every coordinate; data-driven box when absent.
    pub range: Option<[f64; 2]>,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        HistogramSpec { bins: 40, range: None, bootstrap: 200, seed: 0 }
    }
}

impl HistogramSpec {
    pub fn binning(&self, sets: &[&[Vec<f64>]]) -> Binning {
        match self.range {
            Some([lo, hi]) => {
                let dim = sets.iter().flat_map(|s| s.first()).next().map_or(0, |p| p.len());
                Binning { lo: vec![lo; dim], hi: vec![hi; dim], bins: self.bins }
            }
            None => Binning::covering(sets, self.bins),
        }
    }
}

/// Regular grid over a shared bounding box. Points outside the box fall
/// into one extra overflow cell, so the cells always partition space.
#[derive(Debug, Clone, PartialEq)]
pub struct Binning {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bins: usize,
}

impl Binning {
    /// Smallest box containing every point of both sets.
    pub fn covering(sets: &[&[Vec<f64>]], bins: usize) -> Self {
        let dim = sets.iter().flat_map(|s| s.first()).next().map_or(0, |p| p.len());
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for set in sets {
            for p in set.iter() {
                for c in 0..dim {
                    lo[c] = lo[c].min(p[c]);
                    hi[c] = hi[c].max(p[c]);
                }
            }
        }
        for c in 0..dim {
            if hi[c] - lo[c] <= 0.0 {
                let pad = 0.5 * lo[c].abs().max(1.0);
                lo[c] -= pad;
                hi[c] += pad;
            }
        }
        Binning { lo, hi, bins }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Number of cells including the overflow cell.
    pub fn n_cells(&self) -> usize {
        self.bins.pow(self.dim() as u32) + 1
    }

    pub fn cell(&self, p: &[f64]) -> usize {
        let mut idx = 0usize;
        for c in 0..self.dim() {
            let w = (self.hi[c] - self.lo[c]) / self.bins as f64;
            let u = (p[c] - self.lo[c]) / w;
            if !(u >= 0.0 && p[c] <= self.hi[c]) {
                return self.n_cells() - 1;
            }
            let k = (u as usize).min(self.bins - 1);
            idx = idx * self.bins + k;
        }
        idx
    }

    pub fn counts(&self, pts: &[Vec<f64>]) -> Vec<u32> {
        let mut out = vec![0u32; self.n_cells()];
        for p in pts {
            out[self.cell(p)] += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_cdf_reference_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(0.5) - 0.691_462_461_274_013).abs() < 1e-10);
        let v = normal_cdf(-1.96);
        assert!((v - 0.024_997_895_148_220_4).abs() < 1e-10, "{v:e}");
    }

    #[test]
    fn line_fit_recovers_exact_line() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|t| 2.0 - 0.5 * t).collect();
        let fit = weighted_line_fit(&x, &y, &[1.0; 10]).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!((fit.intercept - 2.0).abs() < 1e-12);
        assert!(fit.slope_se < 1e-10);
    }

    #[test]
    fn simpson_polynomial_and_sqrt() {
        let (v, _) = adaptive_simpson(|x| x * x * x, 0.0, 2.0, 1e-12).unwrap();
        assert!((v - 4.0).abs() < 1e-12);
        let (v, _) = adaptive_simpson(|x: f64| x.sqrt(), 0.0, 1.0, 1e-10).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn ks_identical_and_shifted() {
        let a: Vec<f64> = (0..500).map(|i| i as f64 / 500.0).collect();
        assert!(ks_two_sample(&a, &a).p_value > 0.99);
        let b: Vec<f64> = a.iter().map(|x| x + 0.3).collect();
        assert!(ks_two_sample(&a, &b).p_value < 1e-6);
    }

    #[test]
    fn binning_overflow_cell() {
        let b = Binning { lo: vec![0.0], hi: vec![1.0], bins: 4 };
        assert_eq!(b.cell(&[0.0]), 0);
        assert_eq!(b.cell(&[1.0]), 3);
        assert_eq!(b.cell(&[0.3]), 1);
        assert_eq!(b.cell(&[1.5]), 4);
        assert_eq!(b.cell(&[-0.1]), 4);
    }
}
