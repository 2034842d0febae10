//! Generalized estimating equations with weighted g-computation.
//!
//! The working model is `g(E[Y_ij | U_ij]) = U_ij' beta` with a canonical
//! link and an independence or exchangeable working correlation. Arm means
//! are obtained by averaging fitted values with `A` set to each arm, then
//! weighting clusters equally (cluster level) or by `N_i` (individual
//! level).

use serde::{Deserialize, Serialize};

use crate::data::{EstimandSpec, EstimateResult, EstimatorTag, Level, Measure, TrialDataset};
use crate::design::{ClusterDesign, CovariateSelector, Design};
use crate::error::{Error, Result};
use crate::numerics::{self, Link};

pub const GEE_TOLERANCE: f64 = 1e-8;
pub const GEE_MAX_ITER: usize = 100;
/// Warn about separation once some fitted probability is within 1e-6 of 0 or 1.
/// Scoring stops on stalled fitted means near |eta| = 18, so the IRLS
/// threshold is never reached here.
pub const SEPARATION_WARN_LOGIT: f64 = 13.8;
/// Margin kept between `rho` and the edges of its admissible interval.
pub const RHO_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Correlation {
    Independence,
    Exchangeable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterWeighting {
    Unit,
    SourceSize,
    InverseM,
}

/// Denominator of the moment estimator for `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairCount {
    /// `k(N) = N(N-1)/2 - p - q - 3`.
    SourceSize,
    /// `k'(M) = M(M-1)/2 - p - q - 3`, counting observed pairs.
    Observed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeeSpec {
    pub link: Link,
    pub correlation: Correlation,
    pub weights: ClusterWeighting,
    pub covariates: CovariateSelector,
    pub pair_count: PairCount,
    /// Divide the residual cross-products by the Pearson scale estimate.
    pub pearson_scale: bool,
}

impl GeeSpec {
    /// Defaults for `ds` and `level`: canonical link matching the outcome
    /// type, exchangeable correlation for continuous outcomes and
    /// independence for binary ones, `N_i` weights at the individual level.
    pub fn default_for(ds: &TrialDataset, level: Level) -> Self {
        let binary = ds.has_binary_outcome();
        Self {
            link: if binary { Link::Logit } else { Link::Identity },
            correlation: if binary {
                Correlation::Independence
            } else {
                Correlation::Exchangeable
            },
            weights: match level {
                Level::Cluster => ClusterWeighting::Unit,
                Level::Individual => ClusterWeighting::SourceSize,
            },
            covariates: CovariateSelector::ALL,
            pair_count: PairCount::SourceSize,
            pearson_scale: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeeFit {
    pub beta: Vec<f64>,
    pub rho: f64,
    pub converged: bool,
    /// Outer (beta, rho) alternations.
    pub iterations: usize,
    pub spec: GeeSpec,
    pub design: Design,
    /// Per-cluster working-model weights `w_i`.
    pub weights: Vec<f64>,
    /// Largest absolute linear predictor; above
    /// [`SEPARATION_WARN_LOGIT`] some fitted probabilities sit at 0 or 1.
    pub max_linear_predictor: f64,
}

/// Inverse of the exchangeable correlation matrix as `a I - b 1 1'`.
fn exchangeable_inverse(rho: f64, m: f64) -> (f64, f64) {
    let a = 1.0 / (1.0 - rho);
    let b = rho / ((1.0 - rho) * (1.0 + (m - 1.0) * rho));
    (a, b)
}

fn cluster_weights(ds: &TrialDataset, w: ClusterWeighting) -> Result<Vec<f64>> {
    ds.clusters
        .iter()
        .map(|c| match w {
            ClusterWeighting::Unit => Ok(1.0),
            ClusterWeighting::SourceSize => c.source_size_f64(),
            ClusterWeighting::InverseM => Ok(1.0 / c.m()),
        })
        .collect()
}

/// Prepared GEE estimating equations for one dataset.
pub struct GeeModel<'a> {
    pub design: &'a Design,
    pub link: Link,
    pub weights: &'a [f64],
}

impl GeeModel<'_> {
    /// Standardized residuals `(Y - mu) / sqrt(v(mu))` and `sqrt(v(mu))` for
    /// one cluster.
    fn residuals(&self, c: &ClusterDesign, beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut r = Vec::with_capacity(c.size());
        let mut sd = Vec::with_capacity(c.size());
        for j in 0..c.size() {
            let eta: f64 = self.design.row(c, j).iter().zip(beta).map(|(x, b)| x * b).sum();
            let mu = self.link.inverse(eta);
            let s = self.link.variance(mu).sqrt();
            r.push((c.y[j] - mu) / s);
            sd.push(s);
        }
        (r, sd)
    }

    /// Returns `(sum_i w_i D_i' V_i^{-1} (Y_i - mu_i), sum_i w_i D_i' V_i^{-1} D_i)`.
    ///
    /// With a canonical link `D_i = Z_i U_i`, so both reduce to products of
    /// `Z^{1/2} U` with the closed-form inverse `a I - b 1 1'`.
    pub fn score_and_information(&self, beta: &[f64], rho: f64) -> (Vec<f64>, nalgebra::DMatrix<f64>) {
        let d = self.design.d;
        let mut score = vec![0.0; d];
        let mut info = nalgebra::DMatrix::zeros(d, d);
        let mut ut1 = vec![0.0; d];
        let mut row_scaled = vec![0.0; d];
        for (c, &w) in self.design.clusters.iter().zip(self.weights) {
            if w == 0.0 {
                continue;
            }
            let (r, sd) = self.residuals(c, beta);
            let (a, b) = exchangeable_inverse(rho, c.m);
            ut1.iter_mut().for_each(|v| *v = 0.0);
            let mut sum_r = 0.0;
            for j in 0..c.size() {
                let row = self.design.row(c, j);
                for k in 0..d {
                    row_scaled[k] = row[k] * sd[j];
                    ut1[k] += row_scaled[k];
                    score[k] += w * a * row_scaled[k] * r[j];
                }
                sum_r += r[j];
                for k in 0..d {
                    let rk = w * a * row_scaled[k];
                    for l in 0..=k {
                        info[(k, l)] += rk * row_scaled[l];
                    }
                }
            }
            for k in 0..d {
                score[k] -= w * b * ut1[k] * sum_r;
                for l in 0..=k {
                    info[(k, l)] -= w * b * ut1[k] * ut1[l];
                }
            }
        }
        for k in 0..d {
            for l in 0..k {
                info[(l, k)] = info[(k, l)];
            }
        }
        (score, info)
    }

    /// Fitted means of every observed individual, cluster by cluster.
    pub fn fitted_means(&self, beta: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        for c in &self.design.clusters {
            for j in 0..c.size() {
                let eta: f64 = self.design.row(c, j).iter().zip(beta).map(|(x, b)| x * b).sum();
                out.push(self.link.inverse(eta));
            }
        }
        out
    }

    /// Fisher scoring for `beta` at fixed `rho`.
    ///
    /// Stops when the coefficient step or the change in every fitted mean
    /// falls below [`GEE_TOLERANCE`]. The second test lets fits with
    /// (quasi-)separated binary outcomes finish: some coefficients drift
    /// without bound while the fitted means, and so the g-computation
    /// estimate, settle.
    fn solve_beta(&self, start: &[f64], rho: f64) -> Result<Vec<f64>> {
        let mut beta = start.to_vec();
        let mut fitted = self.fitted_means(&beta);
        for _ in 0..GEE_MAX_ITER {
            let (score, info) = self.score_and_information(&beta, rho);
            let step = numerics::solve_linear(&info, &nalgebra::DVector::from_vec(score))
                .map_err(|_| Error::RankDeficientDesign("GEE information matrix is singular".into()))?;
            let mut sup = 0.0f64;
            for (b, s) in beta.iter_mut().zip(step.iter()) {
                *b += s;
                sup = sup.max(s.abs());
            }
            if !sup.is_finite() {
                return Err(Error::NonFiniteEvaluation("GEE scoring step".into()));
            }
            let next = self.fitted_means(&beta);
            let moved = max_abs_diff(&next, &fitted);
            fitted = next;
            if sup < GEE_TOLERANCE || moved < GEE_TOLERANCE {
                return Ok(beta);
            }
        }
        Err(Error::NonConvergence {
            stage: "GEE coefficients".into(),
            iterations: GEE_MAX_ITER,
        })
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `sum_i h_i / (scale * sum_i k_i)` where `h_i` sums the cross-products of
/// distinct residual pairs in cluster `i`.
pub fn moment_rho(residuals: &[Vec<f64>], pair_counts: &[f64], scale: f64) -> Result<f64> {
    let mut h = 0.0;
    for r in residuals {
        let s: f64 = r.iter().sum();
        let ss: f64 = r.iter().map(|v| v * v).sum();
        h += 0.5 * (s * s - ss);
    }
    let k: f64 = pair_counts.iter().sum();
    if residuals.iter().all(|r| r.len() < 2) || k.abs() < 1e-12 || scale <= 0.0 {
        return Err(Error::NoPairs);
    }
    Ok(h / (scale * k))
}

/// Moment estimate of the exchangeable correlation at `beta`.
pub fn estimate_rho(ds: &TrialDataset, design: &Design, beta: &[f64], spec: &GeeSpec) -> Result<f64> {
    let model = GeeModel {
        design,
        link: spec.link,
        weights: &[],
    };
    let extra = (ds.p() + ds.q() + 3) as f64;
    let mut residuals = Vec::with_capacity(design.clusters.len());
    let mut counts = Vec::with_capacity(design.clusters.len());
    let mut ss = 0.0;
    let mut total = 0usize;
    for c in &design.clusters {
        let (r, _) = model.residuals(c, beta);
        ss += r.iter().map(|v| v * v).sum::<f64>();
        total += r.len();
        residuals.push(r);
        let size = match (spec.pair_count, c.n) {
            (PairCount::SourceSize, Some(n)) => n,
            _ => c.m,
        };
        counts.push(size * (size - 1.0) / 2.0 - extra);
    }
    let scale = if spec.pearson_scale {
        ss / (total as f64 - design.d as f64).max(1.0)
    } else {
        1.0
    };
    if scale == 0.0 {
        // Perfect fit: no residual correlation to estimate.
        return Ok(0.0);
    }
    moment_rho(&residuals, &counts, scale)
}

fn clamp_rho(rho: f64, m_max: f64) -> f64 {
    let low = if m_max > 1.0 { -1.0 / (m_max - 1.0) } else { -1.0 } + RHO_MARGIN;
    rho.clamp(low, 1.0 - RHO_MARGIN)
}

/// Solves the GEE, alternating `beta` (to convergence) and `rho`.
pub fn fit_gee(ds: &TrialDataset, spec: &GeeSpec) -> Result<GeeFit> {
    let design = Design::build(ds, spec.covariates)?;
    let weights = cluster_weights(ds, spec.weights)?;
    let model = GeeModel {
        design: &design,
        link: spec.link,
        weights: &weights,
    };
    let mut beta = model.solve_beta(&vec![0.0; design.d], 0.0)?;
    let mut rho = 0.0;
    let mut iterations = 1;
    if spec.correlation == Correlation::Exchangeable {
        let m_max = design.clusters.iter().map(|c| c.m).fold(1.0, f64::max);
        let mut converged = false;
        for it in 0..GEE_MAX_ITER {
            let rho_new = clamp_rho(estimate_rho(ds, &design, &beta, spec)?, m_max);
            let beta_new = model.solve_beta(&beta, rho_new)?;
            let moved = max_abs_diff(&beta_new, &beta)
                .min(max_abs_diff(&model.fitted_means(&beta_new), &model.fitted_means(&beta)));
            let change = moved.max((rho_new - rho).abs());
            beta = beta_new;
            rho = rho_new;
            iterations = it + 1;
            if change < GEE_TOLERANCE {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence {
                stage: "GEE correlation".into(),
                iterations: GEE_MAX_ITER,
            });
        }
    }
    let max_linear_predictor = design
        .clusters
        .iter()
        .flat_map(|c| (0..c.size()).map(move |j| (c, j)))
        .map(|(c, j)| design.row(c, j).iter().zip(&beta).map(|(x, b)| x * b).sum::<f64>().abs())
        .fold(0.0, f64::max);
    Ok(GeeFit {
        beta,
        rho,
        converged: true,
        iterations,
        spec: *spec,
        design,
        weights,
        max_linear_predictor,
    })
}

/// Per-cluster `mu_bar_i(a)` for both arms.
pub fn cluster_predictions(fit: &GeeFit) -> Vec<(f64, f64)> {
    fit.design
        .clusters
        .iter()
        .map(|c| {
            (
                fit.design.counterfactual_mean(c, &fit.beta, fit.spec.link, 1.0),
                fit.design.counterfactual_mean(c, &fit.beta, fit.spec.link, 0.0),
            )
        })
        .collect()
}

/// Estimand weights: 1 per cluster or `N_i`.
pub(crate) fn estimand_weights(design: &Design, level: Level) -> Result<Vec<f64>> {
    design
        .clusters
        .iter()
        .map(|c| match level {
            Level::Cluster => Ok(1.0),
            Level::Individual => c.n.ok_or(Error::LevelUnavailable),
        })
        .collect()
}

/// Weighted g-computation means `(mu(1), mu(0))`.
pub fn g_compute_gee(fit: &GeeFit, level: Level) -> Result<(f64, f64)> {
    let omega = estimand_weights(&fit.design, level)?;
    Ok(weighted_arm_means(&cluster_predictions(fit), &omega))
}

pub(crate) fn weighted_arm_means(pred: &[(f64, f64)], omega: &[f64]) -> (f64, f64) {
    let total: f64 = omega.iter().sum();
    let mu1 = pred.iter().zip(omega).map(|(p, w)| w * p.0).sum::<f64>() / total;
    let mu0 = pred.iter().zip(omega).map(|(p, w)| w * p.1).sum::<f64>() / total;
    (mu1, mu0)
}

/// Sandwich variance of `f(mu(1), mu(0))` for a weighted g-computation
/// estimator whose working model has arm-level score `M_i (Ybar_i - mu_bar_i)`
/// scaled by `c_i` and weighted by `w_i`.
///
/// The per-cluster influence of `mu(a)` is
/// `omega_i (mu_bar_i(a) - mu(a)) + w_i I{A_i = a} c_i M_i (Ybar_i - mu_bar_i(a)) * S_omega / S_a`
/// with `S_a = sum_l w_l I{A_l = a} c_l M_l`; the variance is
/// `sum_i (grad' IF_i)^2 / (sum omega)^2 * m / (m - 2)`.
pub(crate) fn gcomp_sandwich(
    design: &Design,
    pred: &[(f64, f64)],
    omega: &[f64],
    w: &[f64],
    c: &[f64],
    measure: Measure,
    mu: (f64, f64),
) -> Result<f64> {
    let m = design.clusters.len() as f64;
    let total_omega: f64 = omega.iter().sum();
    let mut s = [0.0, 0.0];
    for (i, cl) in design.clusters.iter().enumerate() {
        let arm = if cl.treated { 0 } else { 1 };
        s[arm] += w[i] * c[i] * cl.m;
    }
    let (g1, g0) = measure.gradient(mu.0, mu.1)?;
    let mut acc = 0.0;
    for (i, cl) in design.clusters.iter().enumerate() {
        let ybar = cl.y_bar();
        let resid = |mu_bar: f64, s_a: f64| w[i] * c[i] * cl.m * (ybar - mu_bar) * total_omega / s_a;
        let mut if1 = omega[i] * (pred[i].0 - mu.0);
        let mut if0 = omega[i] * (pred[i].1 - mu.1);
        if cl.treated {
            if1 += resid(pred[i].0, s[0]);
        } else {
            if0 += resid(pred[i].1, s[1]);
        }
        let v = g1 * if1 + g0 * if0;
        acc += v * v;
    }
    Ok(acc / (total_omega * total_omega) * small_sample_factor(m))
}

/// `m / (m - 2)`, the factor matching `m - 2` degrees of freedom.
pub fn small_sample_factor(m: f64) -> f64 {
    if m > 2.0 {
        m / (m - 2.0)
    } else {
        1.0
    }
}

/// Sandwich variance of the GEE-g estimate of `f(mu(1), mu(0))`.
pub fn sandwich_gee(fit: &GeeFit, level: Level, measure: Measure) -> Result<f64> {
    let omega = estimand_weights(&fit.design, level)?;
    let pred = cluster_predictions(fit);
    let mu = weighted_arm_means(&pred, &omega);
    let c: Vec<f64> = fit
        .design
        .clusters
        .iter()
        .map(|cl| 1.0 / (1.0 + (cl.m - 1.0) * fit.rho))
        .collect();
    gcomp_sandwich(&fit.design, &pred, &omega, &fit.weights, &c, measure, mu)
}

/// Fits the GEE and returns the GEE-g estimate with its sandwich variance.
pub fn estimate_gee(
    ds: &TrialDataset,
    estimand: &EstimandSpec,
    spec: &GeeSpec,
    ci_level: f64,
) -> Result<EstimateResult> {
    let fit = fit_gee(ds, spec)?;
    let (mu1, mu0) = g_compute_gee(&fit, estimand.level)?;
    let variance = sandwich_gee(&fit, estimand.level, estimand.measure)?;
    let dof = ds.m().saturating_sub(2).max(1);
    let mut res = EstimateResult::new(EstimatorTag::GeeG, estimand, mu1, mu0, variance, dof, ci_level)?
        .with_diagnostic("iterations", fit.iterations as f64)
        .with_diagnostic("rho", fit.rho)
        .with_diagnostic("beta_treatment", fit.beta[crate::design::TREATMENT_COLUMN]);
    if fit.spec.link == Link::Logit && fit.max_linear_predictor > SEPARATION_WARN_LOGIT {
        res.warnings
            .push("GEE fitted probabilities numerically 0 or 1 (possible separation)".into());
    }
    Ok(res)
}
