//! Random-intercept linear mixed model with weighted g-computation.
//!
//! The marginal likelihood of `Y_i ~ Normal(U_i alpha, sigma2 I + tau2 1 1')`
//! is maximized with `alpha` and `sigma2` profiled out in closed form, which
//! leaves a one-dimensional search over the variance ratio
//! `lambda = tau2 / sigma2`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{t_confidence_interval, EstimandSpec, EstimateResult, EstimatorTag, Level, Measure, TrialDataset};
use crate::design::{CovariateSelector, Design, TREATMENT_COLUMN};
use crate::error::{Error, Result};
use crate::gee::{estimand_weights, gcomp_sandwich, weighted_arm_means};
use crate::numerics::{self, Link};

pub const SIGMA2_FLOOR: f64 = 1e-10;
const GRID_POINTS: usize = 40;
const GOLDEN_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmmSpec {
    pub covariates: CovariateSelector,
    /// Weight each cluster's log-likelihood by `N_i`.
    pub n_weighted: bool,
}

impl LmmSpec {
    pub fn default_for(level: Level) -> Self {
        Self {
            covariates: CovariateSelector::ALL,
            n_weighted: level == Level::Individual,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmmFit {
    pub alpha: Vec<f64>,
    pub sigma2: f64,
    pub tau2: f64,
    pub loglik: f64,
    pub converged: bool,
    pub n_weighted: bool,
    /// Outcome variance was (numerically) zero; `sigma2` sits at its floor.
    pub degenerate: bool,
    pub design: Design,
    pub weights: Vec<f64>,
}

impl LmmFit {
    /// Implied within-cluster correlation `tau2 / (tau2 + sigma2)`.
    pub fn icc(&self) -> f64 {
        self.tau2 / (self.tau2 + self.sigma2)
    }
}

/// Per-cluster sufficient statistics.
struct Moments {
    utu: DMatrix<f64>,
    ut1: DVector<f64>,
    uty: DVector<f64>,
    sum_y: f64,
    yty: f64,
    m: f64,
    w: f64,
}

/// Profiled likelihood for one dataset.
pub struct LmmModel {
    moments: Vec<Moments>,
    d: usize,
}

impl LmmModel {
    pub fn new(design: &Design, weights: &[f64]) -> Self {
        let d = design.d;
        let moments = design
            .clusters
            .iter()
            .zip(weights)
            .map(|(c, &w)| {
                let mut utu = DMatrix::zeros(d, d);
                let mut ut1 = DVector::zeros(d);
                let mut uty = DVector::zeros(d);
                for j in 0..c.size() {
                    let row = design.row(c, j);
                    for k in 0..d {
                        ut1[k] += row[k];
                        uty[k] += row[k] * c.y[j];
                        for l in 0..d {
                            utu[(k, l)] += row[k] * row[l];
                        }
                    }
                }
                Moments {
                    utu,
                    ut1,
                    uty,
                    sum_y: c.y.iter().sum(),
                    yty: c.y.iter().map(|y| y * y).sum(),
                    m: c.m,
                    w,
                }
            })
            .collect();
        Self { moments, d }
    }

    /// GLS coefficients and weighted quadratic form `sum w r' R^{-1} r` at
    /// `lambda`, where `R^{-1} = I - lambda / (1 + M lambda) 1 1'`.
    pub fn profile(&self, lambda: f64) -> Result<(Vec<f64>, f64)> {
        let d = self.d;
        let mut a = DMatrix::zeros(d, d);
        let mut b = DVector::zeros(d);
        let mut yy = 0.0;
        for mo in &self.moments {
            let g = lambda / (1.0 + mo.m * lambda);
            a += (&mo.utu - &mo.ut1 * mo.ut1.transpose() * g) * mo.w;
            b += (&mo.uty - &mo.ut1 * (g * mo.sum_y)) * mo.w;
            yy += mo.w * (mo.yty - g * mo.sum_y * mo.sum_y);
        }
        let alpha = numerics::solve_linear(&a, &b)
            .map_err(|_| Error::RankDeficientDesign("LMM fixed-effect design is singular".into()))?;
        // Q = yy - 2 alpha'b + alpha'A alpha = yy - alpha'b at the GLS solution.
        let q = (yy - alpha.dot(&b)).max(0.0);
        Ok((alpha.iter().copied().collect(), q))
    }

    fn total_weighted_size(&self) -> f64 {
        self.moments.iter().map(|m| m.w * m.m).sum()
    }

    /// Log-likelihood at `(sigma2, tau2)` with `alpha` at its GLS value.
    pub fn loglik(&self, sigma2: f64, tau2: f64) -> Result<f64> {
        let lambda = tau2 / sigma2;
        let (_, q) = self.profile(lambda)?;
        let mut ll = -0.5 * q / sigma2;
        for mo in &self.moments {
            ll -= 0.5 * mo.w * (mo.m * (2.0 * std::f64::consts::PI * sigma2).ln() + (1.0 + mo.m * lambda).ln());
        }
        Ok(ll)
    }

    /// Log-likelihood maximized over `alpha` and `sigma2` at fixed `lambda`.
    /// Returns `(loglik, alpha, sigma2)`.
    pub fn profiled(&self, lambda: f64) -> Result<(f64, Vec<f64>, f64)> {
        let (alpha, q) = self.profile(lambda)?;
        let wm = self.total_weighted_size();
        let sigma2 = (q / wm).max(SIGMA2_FLOOR);
        let mut ll = -0.5 * q / sigma2;
        for mo in &self.moments {
            ll -= 0.5 * mo.w * (mo.m * (2.0 * std::f64::consts::PI * sigma2).ln() + (1.0 + mo.m * lambda).ln());
        }
        Ok((ll, alpha, sigma2))
    }
}

fn ratio_to_lambda(r: f64) -> f64 {
    r / (1.0 - r)
}

/// Maximum-likelihood fit of the random-intercept model.
pub fn fit_lmm(ds: &TrialDataset, spec: &LmmSpec) -> Result<LmmFit> {
    let design = Design::build(ds, spec.covariates)?;
    let weights: Vec<f64> = if spec.n_weighted {
        ds.clusters.iter().map(|c| c.source_size_f64()).collect::<Result<_>>()?
    } else {
        vec![1.0; ds.m()]
    };
    let model = LmmModel::new(&design, &weights);

    let ys = ds.clusters.iter().flat_map(|c| &c.outcomes);
    let n = ds.total_individuals() as f64;
    let mean = ys.clone().sum::<f64>() / n;
    let var = ys.map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    if var < 1e-12 {
        let (loglik, alpha, _) = model.profiled(0.0)?;
        return Ok(LmmFit {
            alpha,
            sigma2: SIGMA2_FLOOR,
            tau2: 0.0,
            loglik,
            converged: true,
            n_weighted: spec.n_weighted,
            degenerate: true,
            design,
            weights,
        });
    }

    // Search the correlation scale r = lambda / (1 + lambda) in [0, 1).
    let mut grid: Vec<f64> = (0..GRID_POINTS).map(|k| k as f64 / GRID_POINTS as f64).collect();
    grid.extend([0.99, 0.999, 0.9999]);
    let objective = |r: f64| model.profiled(ratio_to_lambda(r)).map(|v| v.0);
    let values = grid.iter().map(|&r| objective(r)).collect::<Result<Vec<_>>>()?;
    let best = values
        .iter()
        .enumerate()
        .fold(0, |b, (k, v)| if *v > values[b] { k } else { b });
    let at_edge = best == grid.len() - 1;

    let mut r_best = grid[best];
    let mut ll_best = values[best];
    if !at_edge {
        let lo = if best == 0 { 0.0 } else { grid[best - 1] };
        let hi = grid[best + 1];
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (lo, hi);
        let mut x1 = b - phi * (b - a);
        let mut x2 = a + phi * (b - a);
        let mut f1 = objective(x1)?;
        let mut f2 = objective(x2)?;
        while b - a > GOLDEN_TOLERANCE {
            if f1 < f2 {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + phi * (b - a);
                f2 = objective(x2)?;
            } else {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - phi * (b - a);
                f1 = objective(x1)?;
            }
        }
        for (r, f) in [(x1, f1), (x2, f2)] {
            if f > ll_best {
                r_best = r;
                ll_best = f;
            }
        }
    }
    let lambda = ratio_to_lambda(r_best);
    let (loglik, alpha, sigma2) = model.profiled(lambda)?;
    if !loglik.is_finite() {
        return Err(Error::NonFiniteEvaluation("LMM log-likelihood".into()));
    }
    if at_edge {
        return Err(Error::NonConvergence {
            stage: "LMM variance components (between-cluster variance dominates)".into(),
            iterations: grid.len(),
        });
    }
    Ok(LmmFit {
        alpha,
        sigma2,
        tau2: lambda * sigma2,
        loglik,
        converged: true,
        n_weighted: spec.n_weighted,
        degenerate: false,
        design,
        weights,
    })
}

pub fn cluster_predictions(fit: &LmmFit) -> Vec<(f64, f64)> {
    fit.design
        .clusters
        .iter()
        .map(|c| {
            (
                fit.design.counterfactual_mean(c, &fit.alpha, Link::Identity, 1.0),
                fit.design.counterfactual_mean(c, &fit.alpha, Link::Identity, 0.0),
            )
        })
        .collect()
}

/// `alpha_0 + alpha_A a + alpha_L' Lbar`, with `Lbar` averaged over clusters
/// (cluster level) or `N_i`-weighted (individual level).
pub fn g_compute_lmm(fit: &LmmFit, level: Level) -> Result<(f64, f64)> {
    let omega = estimand_weights(&fit.design, level)?;
    Ok(weighted_arm_means(&cluster_predictions(fit), &omega))
}

/// Sandwich variance; cluster `i`'s score is scaled by `1 / (sigma2 + M_i tau2)`.
pub fn sandwich_lmm(fit: &LmmFit, level: Level, measure: Measure) -> Result<f64> {
    let omega = estimand_weights(&fit.design, level)?;
    let pred = cluster_predictions(fit);
    let mu = weighted_arm_means(&pred, &omega);
    let c: Vec<f64> = fit
        .design
        .clusters
        .iter()
        .map(|cl| 1.0 / (fit.sigma2 + cl.m * fit.tau2))
        .collect();
    gcomp_sandwich(&fit.design, &pred, &omega, &fit.weights, &c, measure, mu)
}

pub fn estimate_lmm(
    ds: &TrialDataset,
    estimand: &EstimandSpec,
    spec: &LmmSpec,
    ci_level: f64,
) -> Result<EstimateResult> {
    let fit = fit_lmm(ds, spec)?;
    let (mu1, mu0) = g_compute_lmm(&fit, estimand.level)?;
    let variance = sandwich_lmm(&fit, estimand.level, estimand.measure)?;
    let dof = ds.m().saturating_sub(2).max(1);
    let mut res = EstimateResult::new(EstimatorTag::LmmG, estimand, mu1, mu0, variance, dof, ci_level)?;
    if estimand.measure == Measure::Difference {
        // mu(1) - mu(0) is alpha_A in exact arithmetic; report the
        // coefficient itself rather than a difference of rounded means.
        res.delta = fit.alpha[TREATMENT_COLUMN];
        (res.ci_low, res.ci_high) = t_confidence_interval(res.delta, res.variance, dof, ci_level);
    }
    let mut res = res
        .with_diagnostic("sigma2", fit.sigma2)
        .with_diagnostic("tau2", fit.tau2)
        .with_diagnostic("loglik", fit.loglik);
    if fit.degenerate {
        res.warnings.push("outcome has no variation; residual variance floored".into());
    }
    Ok(res)
}
