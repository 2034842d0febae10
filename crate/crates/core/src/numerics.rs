//! Dense numeric kernel shared by the estimators.
//!
//! Everything here is a pure function over `nalgebra` matrices or plain
//! slices: linear solves, IRLS for canonical-link GLMs, central-difference
//! Jacobians, non-negative least squares and Student-t quantiles.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PIVOT_TOLERANCE: f64 = 1e-12;
pub const IRLS_TOLERANCE: f64 = 1e-8;
pub const IRLS_MAX_ITER: usize = 100;
/// Fitted probabilities are clamped to this distance from 0 and 1 before
/// they enter variance weights.
pub const PROB_CLAMP: f64 = 1e-8;
/// Linear predictors beyond this magnitude flag quasi-separation.
pub const SEPARATION_LOGIT: f64 = 30.0;
/// Relative tolerance for declaring a design column aliased.
pub const ALIAS_TOLERANCE: f64 = 1e-7;

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Canonical link of a working GLM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    Identity,
    Logit,
}

impl Link {
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => expit(eta),
        }
    }

    /// Variance function `v(mu)`; for canonical links this is also
    /// `d mu / d eta`.
    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => {
                let p = mu.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                p * (1.0 - p)
            }
        }
    }
}

/// Solves `a x = b` by LU with partial pivoting.
///
/// A pivot smaller than [`PIVOT_TOLERANCE`] in magnitude is reported as
/// [`Error::SingularMatrix`].
pub fn solve_linear(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "system is {}x{} with right-hand side of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let mut lu = a.clone();
    let mut x = b.clone();
    for k in 0..n {
        let (mut piv, mut best) = (k, lu[(k, k)].abs());
        for r in (k + 1)..n {
            let v = lu[(r, k)].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if !(best >= PIVOT_TOLERANCE) {
            return Err(Error::SingularMatrix {
                column: k,
                pivot: best,
            });
        }
        if piv != k {
            lu.swap_rows(k, piv);
            x.swap_rows(k, piv);
        }
        let d = lu[(k, k)];
        for r in (k + 1)..n {
            let f = lu[(r, k)] / d;
            if f != 0.0 {
                for c in k..n {
                    let v = lu[(k, c)];
                    lu[(r, c)] -= f * v;
                }
                x[r] -= f * x[k];
            }
        }
    }
    for k in (0..n).rev() {
        let mut s = x[k];
        for c in (k + 1)..n {
            s -= lu[(k, c)] * x[c];
        }
        x[k] = s / lu[(k, k)];
    }
    Ok(x)
}

/// Inverse of a square matrix, column by column through [`solve_linear`].
pub fn invert(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut inv = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        let col = solve_linear(a, &e)?;
        inv.set_column(j, &col);
    }
    Ok(inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlmStatus {
    Converged,
    NotConverged,
    SeparationSuspected,
}

/// Result of an IRLS fit.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    /// One entry per design column; aliased columns hold exactly zero.
    pub coefficients: Vec<f64>,
    pub link: Link,
    pub status: GlmStatus,
    pub iterations: usize,
    /// Prior weight times the variance weight at the final iterate.
    pub weights_used: Vec<f64>,
    /// Columns dropped as linearly dependent on earlier ones.
    pub aliased: Vec<usize>,
}

impl GlmFit {
    pub fn converged(&self) -> bool {
        self.status == GlmStatus::Converged
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let eta: f64 = row
            .iter()
            .zip(&self.coefficients)
            .map(|(x, b)| x * b)
            .sum();
        self.link.inverse(eta)
    }

    /// Indices of the columns that carry free coefficients.
    pub fn free_columns(&self) -> Vec<usize> {
        (0..self.coefficients.len())
            .filter(|j| !self.aliased.contains(j))
            .collect()
    }

    /// Turns a non-converged fit into an error naming `stage`.
    pub fn require_converged(self, stage: &str) -> Result<Self> {
        match self.status {
            GlmStatus::Converged => Ok(self),
            _ => Err(Error::NonConvergence {
                stage: stage.to_string(),
                iterations: self.iterations,
            }),
        }
    }
}

fn check_glm_input(x: &DMatrix<f64>, y: &[f64], weights: &[f64]) -> Result<()> {
    if x.nrows() != y.len() || y.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} rows, response {} and weights {}",
            x.nrows(),
            y.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Domain("GLM weights must be finite and non-negative".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEvaluation("GLM input".into()));
    }
    Ok(())
}

fn weighted_normal_equations(
    x: &DMatrix<f64>,
    cols: &[usize],
    w: &[f64],
    z: &[f64],
) -> (DMatrix<f64>, DVector<f64>) {
    let d = cols.len();
    let mut xtx = DMatrix::zeros(d, d);
    let mut xtz = DVector::zeros(d);
    for i in 0..x.nrows() {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        for (a, &ca) in cols.iter().enumerate() {
            let xa = x[(i, ca)] * wi;
            xtz[a] += xa * z[i];
            for (b, &cb) in cols.iter().enumerate().take(a + 1) {
                xtx[(a, b)] += xa * x[(i, cb)];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            xtx[(b, a)] = xtx[(a, b)];
        }
    }
    (xtx, xtz)
}

/// Fits a canonical-link GLM by iteratively reweighted least squares.
///
/// Solves `sum_i w_i x_i (y_i - g^{-1}(x_i' beta)) = 0`. All columns must
/// be linearly independent; see [`fit_glm_aliased`] for the variant that
/// drops dependent columns.
pub fn fit_glm(x: &DMatrix<f64>, y: &[f64], link: Link, weights: &[f64]) -> Result<GlmFit> {
    check_glm_input(x, y, weights)?;
    let cols: Vec<usize> = (0..x.ncols()).collect();
    irls(x, y, link, weights, &cols)
}

/// Like [`fit_glm`], but columns that are (numerically) linear combinations
/// of earlier columns are dropped and their coefficients fixed at zero.
pub fn fit_glm_aliased(
    x: &DMatrix<f64>,
    y: &[f64],
    link: Link,
    weights: &[f64],
) -> Result<GlmFit> {
    check_glm_input(x, y, weights)?;
    let kept = independent_columns(x, weights);
    if kept.is_empty() {
        return Err(Error::RankDeficientDesign("every design column is zero".into()));
    }
    irls(x, y, link, weights, &kept)
}

/// Greedy column selection by weighted modified Gram-Schmidt: a column is
/// kept when its residual after projection on the kept columns retains
/// more than [`ALIAS_TOLERANCE`] of its norm.
pub fn independent_columns(x: &DMatrix<f64>, weights: &[f64]) -> Vec<usize> {
    let n = x.nrows();
    let sw: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    for j in 0..x.ncols() {
        let mut v: Vec<f64> = (0..n).map(|i| x[(i, j)] * sw[i]).collect();
        let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        for q in &basis {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= dot * qi;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > ALIAS_TOLERANCE * norm0 {
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            basis.push(v);
            kept.push(j);
        }
    }
    kept
}

fn irls(x: &DMatrix<f64>, y: &[f64], link: Link, weights: &[f64], cols: &[usize]) -> Result<GlmFit> {
    let n = x.nrows();
    let p = x.ncols();
    let mut beta = vec![0.0; p];
    let aliased: Vec<usize> = (0..p).filter(|j| !cols.contains(j)).collect();
    let linpred = |beta: &[f64], i: usize| -> f64 { cols.iter().map(|&c| x[(i, c)] * beta[c]).sum() };

    if link == Link::Identity {
        let (xtx, xty) = weighted_normal_equations(x, cols, weights, y);
        let sol = solve_linear(&xtx, &xty)?;
        for (k, &c) in cols.iter().enumerate() {
            beta[c] = sol[k];
        }
        return Ok(GlmFit {
            coefficients: beta,
            link,
            status: GlmStatus::Converged,
            iterations: 1,
            weights_used: weights.to_vec(),
            aliased,
        });
    }

    let mut w_used = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut status = GlmStatus::NotConverged;
    let mut iterations = 0;
    let mut fitted: Vec<f64> = (0..n).map(|i| link.inverse(linpred(&beta, i))).collect();
    let mut max_eta: f64 = 0.0;
    for it in 1..=IRLS_MAX_ITER {
        iterations = it;
        for i in 0..n {
            let eta = linpred(&beta, i);
            let mu = link.inverse(eta).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let v = link.variance(mu);
            w_used[i] = weights[i] * v;
            z[i] = eta + (y[i] - mu) / v;
        }
        let (xtx, xtz) = weighted_normal_equations(x, cols, &w_used, &z);
        let sol = solve_linear(&xtx, &xtz)?;
        let mut delta: f64 = 0.0;
        for (k, &c) in cols.iter().enumerate() {
            delta = delta.max((sol[k] - beta[c]).abs());
            beta[c] = sol[k];
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFiniteEvaluation("IRLS coefficients".into()));
        }
        // Largest change in any fitted mean: under (quasi-)separation some
        // coefficients grow without bound while the fitted means settle.
        let mut moved: f64 = 0.0;
        max_eta = 0.0;
        for i in 0..n {
            if weights[i] > 0.0 {
                let eta = linpred(&beta, i);
                max_eta = max_eta.max(eta.abs());
                let mu = link.inverse(eta);
                moved = moved.max((mu - fitted[i]).abs());
                fitted[i] = mu;
            }
        }
        if delta < IRLS_TOLERANCE {
            status = GlmStatus::Converged;
            break;
        }
        if moved < IRLS_TOLERANCE && max_eta > SEPARATION_LOGIT {
            status = GlmStatus::SeparationSuspected;
            break;
        }
    }
    // The logistic likelihood is concave, so running out of iterations with
    // a diverging linear predictor means separation whose margin is too
    // thin for the fitted means to settle within the budget.
    if status == GlmStatus::NotConverged && max_eta > SEPARATION_LOGIT {
        status = GlmStatus::SeparationSuspected;
    }
    for i in 0..n {
        let mu = link.inverse(linpred(&beta, i));
        w_used[i] = weights[i] * link.variance(mu);
    }
    Ok(GlmFit {
        coefficients: beta,
        link,
        status,
        iterations,
        weights_used: w_used,
        aliased,
    })
}

/// Central-difference Jacobian of `fun` at `point`.
///
/// Coordinate `j` uses the step `max(step, 1e-6 (1 + |point_j|))`.
pub fn numeric_jacobian<F>(fun: F, point: &[f64], step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let f0 = fun(point);
    if f0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEvaluation("function at the base point".into()));
    }
    let mut jac = DMatrix::zeros(f0.len(), point.len());
    let mut x = point.to_vec();
    for j in 0..point.len() {
        let h = step.max(1e-6 * (1.0 + point[j].abs()));
        x[j] = point[j] + h;
        let up = fun(&x);
        x[j] = point[j] - h;
        let down = fun(&x);
        x[j] = point[j];
        if up.len() != f0.len() || down.len() != f0.len() {
            return Err(Error::DimensionMismatch("function output length changed".into()));
        }
        for i in 0..f0.len() {
            let d = (up[i] - down[i]) / (2.0 * h);
            if !d.is_finite() {
                return Err(Error::NonFiniteEvaluation(format!("derivative in coordinate {j}")));
            }
            jac[(i, j)] = d;
        }
    }
    Ok(jac)
}

/// Non-negative least squares, `min ||A w - b||` subject to `w >= 0`, by
/// the Lawson-Hanson active-set method.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut w = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-10 * (1.0 + a.amax() * b.amax());
    let solve_passive = |passive: &[bool]| -> Option<DVector<f64>> {
        let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let sub = a.select_columns(idx.iter());
        let ata = sub.transpose() * &sub;
        let atb = sub.transpose() * b;
        let s = solve_linear(&ata, &atb).ok()?;
        let mut full = DVector::zeros(n);
        for (k, &j) in idx.iter().enumerate() {
            full[j] = s[k];
        }
        Some(full)
    };
    for _outer in 0..(3 * n + 10) {
        let grad = a.transpose() * (b - a * &w);
        let candidate = (0..n)
            .filter(|&j| !passive[j] && grad[j] > tol)
            .max_by(|&i, &j| grad[i].total_cmp(&grad[j]));
        let Some(t) = candidate else { break };
        passive[t] = true;
        let mut added_ok = false;
        for _inner in 0..(3 * n + 10) {
            let Some(s) = solve_passive(&passive) else {
                passive[t] = false;
                break;
            };
            if (0..n).filter(|&j| passive[j]).all(|j| s[j] > 0.0) {
                w = s;
                added_ok = true;
                break;
            }
            let mut alpha = f64::INFINITY;
            for j in (0..n).filter(|&j| passive[j] && s[j] <= 0.0) {
                let denom = w[j] - s[j];
                if denom > 0.0 {
                    alpha = alpha.min(w[j] / denom);
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            w = &w + (s - &w) * alpha;
            for j in 0..n {
                if passive[j] && w[j] <= 1e-14 {
                    passive[j] = false;
                    w[j] = 0.0;
                }
            }
        }
        if !added_ok && !passive[t] {
            // Newly added column made the passive system singular.
            break;
        }
    }
    w
}

/// `ln Gamma(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    let t = x + 7.5;
    for (k, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + k as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..20_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// CDF of Student's t distribution with `dof` degrees of freedom.
pub fn t_cdf(t: f64, dof: f64) -> f64 {
    let tail = 0.5 * incomplete_beta(0.5 * dof, 0.5, dof / (dof + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Quantile of Student's t distribution, found by bisection on [`t_cdf`].
pub fn t_quantile(p: f64, dof: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must lie in (0, 1)");
    assert!(dof > 0.0, "degrees of freedom must be positive");
    if p == 0.5 {
        return 0.0;
    }
    if p < 0.5 {
        return -t_quantile(1.0 - p, dof);
    }
    let mut hi = 1.0;
    while t_cdf(hi, dof) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_cdf(mid, dof) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    0.5 * (lo + hi)
}
