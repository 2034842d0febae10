//! Efficient estimators built on the per-cluster scores
//! `D_i(a) = I{A_i = a} / pi_a (Ybar_i - eta_a) + kappa_a / pi_a (eta_a - zeta_a) + zeta_a`.
//!
//! Arm means are `mean(D_i(a))` (cluster level) or `sum N_i D_i(a) / sum N_i`
//! (individual level). Eff-PM gets its variance from the sandwich of the
//! stacked estimating equations; Eff-ML from fold-centered scores.

use serde::{Deserialize, Serialize};

use crate::data::{
    ClusterRecord, EstimandSpec, EstimateResult, EstimatorTag, Level, Measure, PopulationMode,
    TrialDataset,
};
use crate::error::{Error, Result};
use crate::gee::small_sample_factor;
use crate::nuisance::{
    self, fit_crossfit_nuisances, fit_parametric_nuisances, LearnerLibrary, NuisanceFit,
    NuisanceKind, NuisanceModels, ParametricSystem,
};
use crate::numerics;

/// Relative step of the numeric Jacobian of the stacked equations.
pub const JACOBIAN_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffScore {
    pub d1: f64,
    pub d0: f64,
    pub n_weight: f64,
}

/// `D_i(a)` for one cluster.
pub fn compute_score(cluster: &ClusterRecord, a: u8, eta: f64, zeta: f64, kappa: f64, pi: f64) -> f64 {
    nuisance::efficient_score(cluster.treatment, a, cluster.mean_outcome(), eta, zeta, kappa, pi)
}

pub fn scores(ds: &TrialDataset, nf: &NuisanceFit, level: Level) -> Result<Vec<EffScore>> {
    let weights = nuisance::level_weights(ds, level)?;
    Ok(ds
        .clusters
        .iter()
        .enumerate()
        .map(|(i, c)| EffScore {
            d1: compute_score(c, 1, nf.eta[i][0], nf.zeta[i][0], nf.kappa(i, 1), ds.pi),
            d0: compute_score(c, 0, nf.eta[i][1], nf.zeta[i][1], nf.kappa(i, 0), ds.pi),
            n_weight: weights[i],
        })
        .collect())
}

/// Weighted means of the scores; the weights are 1 at the cluster level.
pub fn arm_means(scores: &[EffScore]) -> (f64, f64) {
    let total: f64 = scores.iter().map(|s| s.n_weight).sum();
    (
        scores.iter().map(|s| s.n_weight * s.d1).sum::<f64>() / total,
        scores.iter().map(|s| s.n_weight * s.d0).sum::<f64>() / total,
    )
}

/// Centering of the weighted scores in the cross-fitting variance at the
/// individual level (at the cluster level both coincide).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MlCentering {
    /// `N_i (D_i - mu_k)` with `mu_k` the fold's `N`-weighted mean.
    FoldRatio,
    /// `N_i D_i - mean_k(N D)`.
    FoldMean,
}

/// Cross-fitting variance of `f(mu(1), mu(0))` with scores centered within
/// folds, times `m / (m - 2)`.
pub fn variance_eff_ml(
    scores: &[EffScore],
    folds: &[usize],
    k: usize,
    measure: Measure,
    mu: (f64, f64),
    centering: MlCentering,
) -> Result<f64> {
    let (g1, g0) = measure.gradient(mu.0, mu.1)?;
    let m = scores.len() as f64;
    let total: f64 = scores.iter().map(|s| s.n_weight).sum();
    let mut acc = 0.0;
    for f in 0..k {
        let members: Vec<&EffScore> = scores.iter().zip(folds).filter(|(_, &g)| g == f).map(|(s, _)| s).collect();
        if members.is_empty() {
            continue;
        }
        let size = members.len() as f64;
        let sw: f64 = members.iter().map(|s| s.n_weight).sum();
        let swd1: f64 = members.iter().map(|s| s.n_weight * s.d1).sum();
        let swd0: f64 = members.iter().map(|s| s.n_weight * s.d0).sum();
        for s in &members {
            let (c1, c0) = match centering {
                MlCentering::FoldRatio => (
                    s.n_weight * (s.d1 - swd1 / sw),
                    s.n_weight * (s.d0 - swd0 / sw),
                ),
                MlCentering::FoldMean => (s.n_weight * s.d1 - swd1 / size, s.n_weight * s.d0 - swd0 / size),
            };
            let v = g1 * c1 + g0 * c0;
            acc += v * v;
        }
    }
    Ok(acc / (total * total) * small_sample_factor(m))
}

/// Singular values of the nuisance block of the stacked Jacobian below
/// this fraction of the largest are treated as zero.
pub const JACOBIAN_RCOND: f64 = 1e-10;

/// Sandwich variance from the stacked equations
/// `psi_i = omega_i (mu(1) - D_i(1), mu(0) - D_i(0), GLM scores)`.
///
/// The nuisance equations do not involve `mu` and `d psi_mu / d mu` is
/// `sum omega` times the identity, so the `mu` rows of `J^{-1}` are
/// `(I, -J_mt J_tt^{-1}) / sum omega` and the sandwich for `mu` is the
/// empirical second moment of `psi_mu - J_mt J_tt^{-1} psi_t`. `J_tt` is
/// inverted by SVD, dropping directions with relative singular value
/// below [`JACOBIAN_RCOND`]: along a separated direction of a logistic
/// nuisance fit the score, its Jacobian and the derivative of `D` all
/// vanish together, so the limit of the sandwich ignores that direction.
/// Returns `None` when the result is not finite.
pub fn variance_eff_pm(
    system: &ParametricSystem,
    measure: Measure,
    mu: (f64, f64),
) -> Result<Option<f64>> {
    let m = system.omega.len();
    let mut point = vec![mu.0, mu.1];
    point.extend_from_slice(&system.theta);
    let dim = point.len();
    let total = |p: &[f64]| {
        let mut s = vec![0.0; dim];
        for i in 0..m {
            for (a, b) in s.iter_mut().zip(system.psi(i, p)) {
                *a += b;
            }
        }
        s
    };
    let jac = numerics::numeric_jacobian(total, &point, JACOBIAN_STEP)?;
    let sum_omega: f64 = system.omega.iter().sum();
    let t = dim - 2;
    // Correction matrix C = J_mt J_tt^+ (2 x t).
    let correction = if t > 0 {
        let j_tt = jac.view((2, 2), (t, t)).into_owned();
        let j_mt = jac.view((0, 2), (2, t)).into_owned();
        let svd = j_tt.svd(true, true);
        let hi = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
        let pinv = match svd.pseudo_inverse(JACOBIAN_RCOND * hi) {
            Ok(p) => p,
            Err(_) => return Ok(None),
        };
        Some(j_mt * pinv)
    } else {
        None
    };
    let (g1, g0) = measure.gradient(mu.0, mu.1)?;
    let mut acc = 0.0;
    for i in 0..m {
        let p = system.psi(i, &point);
        let mut if1 = p[0];
        let mut if0 = p[1];
        if let Some(c) = &correction {
            for k in 0..t {
                if1 -= c[(0, k)] * p[2 + k];
                if0 -= c[(1, k)] * p[2 + k];
            }
        }
        let v = g1 * if1 + g0 * if0;
        acc += v * v;
    }
    let v = acc / (sum_omega * sum_omega);
    if !v.is_finite() {
        return Ok(None);
    }
    Ok(Some(v * small_sample_factor(m as f64)))
}

/// Point estimate and variance from fitted nuisances.
pub fn estimate_eff(
    ds: &TrialDataset,
    estimand: &EstimandSpec,
    tag: EstimatorTag,
    nf: &NuisanceFit,
    centering: MlCentering,
    ci_level: f64,
) -> Result<EstimateResult> {
    let sc = scores(ds, nf, estimand.level)?;
    let mu = arm_means(&sc);
    let mut fallback = false;
    let variance = match &nf.kind {
        NuisanceKind::Parametric(system) => match variance_eff_pm(system, estimand.measure, mu)? {
            Some(v) => v,
            None => {
                fallback = true;
                variance_eff_ml(&sc, &vec![0; sc.len()], 1, estimand.measure, mu, MlCentering::FoldRatio)?
            }
        },
        NuisanceKind::CrossFitted { folds, k, .. } => {
            variance_eff_ml(&sc, folds, *k, estimand.measure, mu, centering)?
        }
    };
    let dof = ds.m().saturating_sub(2).max(1);
    let mut res = EstimateResult::new(tag, estimand, mu.0, mu.1, variance, dof, ci_level)?;
    res.warnings.extend(nf.warnings.iter().cloned());
    if fallback {
        res.warnings
            .push("stacked-equation sandwich is not finite; used the plug-in score variance".into());
        res = res.with_diagnostic("singular_bread", 1.0);
    }
    if let NuisanceKind::CrossFitted { k, seed, .. } = &nf.kind {
        res = res.with_diagnostic("folds", *k as f64).with_diagnostic("fold_seed", *seed as f64);
    }
    let kmin = nf.kappa1.iter().fold(1.0f64, |a, &b| a.min(b));
    let kmax = nf.kappa1.iter().fold(0.0f64, |a, &b| a.max(b));
    Ok(res.with_diagnostic("kappa_min", kmin).with_diagnostic("kappa_max", kmax))
}

fn eta_equals_zeta(estimand: &EstimandSpec) -> Result<bool> {
    match (estimand.population, estimand.level) {
        (PopulationMode::UnknownN, Level::Individual) => Err(Error::LevelUnavailable),
        (PopulationMode::UnknownN, Level::Cluster) => Ok(true),
        _ => Ok(false),
    }
}

pub fn estimate_eff_pm(
    ds: &TrialDataset,
    estimand: &EstimandSpec,
    models: &NuisanceModels,
    ci_level: f64,
) -> Result<EstimateResult> {
    let nf = fit_parametric_nuisances(ds, estimand.level, models, eta_equals_zeta(estimand)?)?;
    estimate_eff(ds, estimand, EstimatorTag::EffPm, &nf, MlCentering::FoldRatio, ci_level)
}

/// Difference of (weighted) arm means of cluster means, with its sandwich
/// variance; equals Eff-PM with constant `eta = zeta`.
pub fn estimate_unadjusted(ds: &TrialDataset, estimand: &EstimandSpec, ci_level: f64) -> Result<EstimateResult> {
    eta_equals_zeta(estimand)?;
    let nf = fit_parametric_nuisances(ds, estimand.level, &NuisanceModels::unadjusted(), false)?;
    estimate_eff(ds, estimand, EstimatorTag::Unadjusted, &nf, MlCentering::FoldRatio, ci_level)
}

#[derive(Debug, Clone)]
pub struct CrossFitOptions {
    pub models: NuisanceModels,
    pub library: LearnerLibrary,
    pub folds: usize,
    pub seed: u64,
    pub centering: MlCentering,
}

impl CrossFitOptions {
    pub fn default_for(ds: &TrialDataset, seed: u64) -> Self {
        Self {
            models: NuisanceModels::machine_learning_default(),
            library: LearnerLibrary::default_for(ds.has_binary_outcome()),
            folds: 5,
            seed,
            centering: MlCentering::FoldRatio,
        }
    }
}

pub fn estimate_eff_ml(
    ds: &TrialDataset,
    estimand: &EstimandSpec,
    opts: &CrossFitOptions,
    ci_level: f64,
) -> Result<EstimateResult> {
    let nf = fit_crossfit_nuisances(
        ds,
        opts.folds,
        &opts.models,
        &opts.library,
        eta_equals_zeta(estimand)?,
        opts.seed,
    )?;
    estimate_eff(ds, estimand, EstimatorTag::EffMl, &nf, opts.centering, ci_level)
}
