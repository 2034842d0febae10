//! One entry point for every estimator, with the options each one reads.

use serde::{Deserialize, Serialize};

use crate::data::{EstimandSpec, EstimateResult, EstimatorTag, TrialDataset};
use crate::design::CovariateSelector;
use crate::efficient::{self, CrossFitOptions, MlCentering};
use crate::error::Result;
use crate::gee::{self, ClusterWeighting, Correlation, GeeSpec, PairCount};
use crate::learners::LearnerSpec;
use crate::lmm::{self, LmmSpec};
use crate::nuisance::{LearnerLibrary, NuisanceModels};
use crate::numerics::Link;

/// Options for every estimator. `None` fields take data-dependent defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSettings {
    pub ci_level: f64,
    pub gee_link: Option<Link>,
    pub gee_correlation: Option<Correlation>,
    pub gee_weights: Option<ClusterWeighting>,
    pub gee_pair_count: PairCount,
    pub gee_pearson_scale: bool,
    pub covariates: CovariateSelector,
    /// Parametric nuisances with intercepts only (Eff-PM).
    pub intercept_only_nuisances: bool,
    pub folds: usize,
    pub seed: u64,
    pub ml_centering: MlCentering,
    pub eta_learners: Option<Vec<LearnerSpec>>,
    pub zeta_learners: Option<Vec<LearnerSpec>>,
    pub kappa_learners: Option<Vec<LearnerSpec>>,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            ci_level: 0.95,
            gee_link: None,
            gee_correlation: None,
            gee_weights: None,
            gee_pair_count: PairCount::SourceSize,
            gee_pearson_scale: true,
            covariates: CovariateSelector::ALL,
            intercept_only_nuisances: false,
            folds: 5,
            seed: 1,
            ml_centering: MlCentering::FoldRatio,
            eta_learners: None,
            zeta_learners: None,
            kappa_learners: None,
        }
    }
}

impl EstimatorSettings {
    pub fn gee_spec(&self, ds: &TrialDataset, estimand: &EstimandSpec) -> GeeSpec {
        let mut spec = GeeSpec::default_for(ds, estimand.level);
        if let Some(l) = self.gee_link {
            spec.link = l;
        }
        if let Some(c) = self.gee_correlation {
            spec.correlation = c;
        }
        if let Some(w) = self.gee_weights {
            spec.weights = w;
        }
        spec.pair_count = self.gee_pair_count;
        spec.pearson_scale = self.gee_pearson_scale;
        spec.covariates = self.covariates;
        spec
    }

    pub fn lmm_spec(&self, estimand: &EstimandSpec) -> LmmSpec {
        LmmSpec {
            covariates: self.covariates,
            ..LmmSpec::default_for(estimand.level)
        }
    }

    pub fn crossfit(&self, ds: &TrialDataset) -> CrossFitOptions {
        let mut opts = CrossFitOptions::default_for(ds, self.seed);
        let base = LearnerLibrary::default_for(ds.has_binary_outcome());
        opts.library = LearnerLibrary {
            eta: self.eta_learners.clone().unwrap_or(base.eta),
            zeta: self.zeta_learners.clone().unwrap_or(base.zeta),
            kappa: self.kappa_learners.clone().unwrap_or(base.kappa),
        };
        opts.folds = self.folds;
        opts.centering = self.ml_centering;
        opts
    }

    pub fn parametric_models(&self) -> NuisanceModels {
        if self.intercept_only_nuisances {
            NuisanceModels::intercept_only()
        } else {
            NuisanceModels::parametric_default()
        }
    }
}

pub fn run_estimator(
    tag: EstimatorTag,
    ds: &TrialDataset,
    estimand: &EstimandSpec,
    settings: &EstimatorSettings,
) -> Result<EstimateResult> {
    let ci = settings.ci_level;
    match tag {
        EstimatorTag::Unadjusted => efficient::estimate_unadjusted(ds, estimand, ci),
        EstimatorTag::GeeG => gee::estimate_gee(ds, estimand, &settings.gee_spec(ds, estimand), ci),
        EstimatorTag::LmmG => lmm::estimate_lmm(ds, estimand, &settings.lmm_spec(estimand), ci),
        EstimatorTag::EffPm => efficient::estimate_eff_pm(ds, estimand, &settings.parametric_models(), ci),
        EstimatorTag::EffMl => efficient::estimate_eff_ml(ds, estimand, &settings.crossfit(ds), ci),
    }
}
