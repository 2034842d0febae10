//! Regression learners for the nuisance functions and their stacked
//! combination.

mod stacking;
pub mod tree;

pub use stacking::{fit_stacking_ensemble, StackedPredictor, INNER_FOLDS};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, GlmFit, Link};
use tree::Tree;

/// Probability predictions are kept inside `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LearnerSpec {
    GlmIdentity,
    GlmLogit,
    Ridge { lambda: f64 },
    Tree { max_depth: usize, min_leaf: usize },
}

impl LearnerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LearnerSpec::Ridge { lambda } if !(lambda >= 0.0) => {
                Err(Error::Config(format!("ridge penalty must be non-negative, got {lambda}")))
            }
            LearnerSpec::Tree { max_depth, min_leaf } if max_depth == 0 || min_leaf == 0 => {
                Err(Error::Config("tree depth and leaf size must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Default library: a GLM, a ridge regression and a shallow tree.
    pub fn default_library(binary_target: bool) -> Vec<LearnerSpec> {
        vec![
            if binary_target {
                LearnerSpec::GlmLogit
            } else {
                LearnerSpec::GlmIdentity
            },
            LearnerSpec::Ridge { lambda: 1.0 },
            LearnerSpec::Tree {
                max_depth: 4,
                min_leaf: 5,
            },
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Regression,
    /// Targets and predictions are probabilities; output is clamped.
    Probability,
}

#[derive(Debug, Clone)]
pub enum FittedLearner {
    Constant(f64),
    /// GLM with an intercept prepended to the features.
    Glm(GlmFit),
    Ridge {
        intercept: f64,
        coef: Vec<f64>,
        center: Vec<f64>,
        scale: Vec<f64>,
    },
    Tree(Tree),
}

pub(crate) fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

impl FittedLearner {
    pub fn predict(&self, row: &[f64]) -> f64 {
        match self {
            FittedLearner::Constant(c) => *c,
            FittedLearner::Glm(fit) => {
                let eta: f64 = fit.coefficients[0]
                    + row.iter().zip(&fit.coefficients[1..]).map(|(x, b)| x * b).sum::<f64>();
                fit.link.inverse(eta)
            }
            FittedLearner::Ridge {
                intercept,
                coef,
                center,
                scale,
            } => {
                intercept
                    + (0..row.len())
                        .filter(|&k| scale[k] > 0.0)
                        .map(|k| coef[k] * (row[k] - center[k]) / scale[k])
                        .sum::<f64>()
            }
            FittedLearner::Tree(t) => t.predict(row),
        }
    }

    pub fn predict_all(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let mut row = vec![0.0; x.ncols()];
        (0..x.nrows())
            .map(|i| {
                for (k, r) in row.iter_mut().enumerate() {
                    *r = x[(i, k)];
                }
                self.predict(&row)
            })
            .collect()
    }
}

fn fit_ridge(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<FittedLearner> {
    let (n, p) = (x.nrows(), x.ncols());
    let nf = n as f64;
    let ybar = y.iter().sum::<f64>() / nf;
    let mut center = vec![0.0; p];
    let mut scale = vec![0.0; p];
    for k in 0..p {
        let col = x.column(k);
        center[k] = col.sum() / nf;
        let var = col.iter().map(|v| (v - center[k]).powi(2)).sum::<f64>() / nf;
        scale[k] = if var > 1e-24 { var.sqrt() } else { 0.0 };
    }
    let live: Vec<usize> = (0..p).filter(|&k| scale[k] > 0.0).collect();
    let mut coef = vec![0.0; p];
    if !live.is_empty() {
        let z = DMatrix::from_fn(n, live.len(), |i, a| {
            let k = live[a];
            (x[(i, k)] - center[k]) / scale[k]
        });
        let yc = DVector::from_iterator(n, y.iter().map(|v| v - ybar));
        let mut gram = z.transpose() * &z;
        for a in 0..live.len() {
            gram[(a, a)] += lambda;
        }
        let rhs = z.transpose() * yc;
        let sol = numerics::solve_linear(&gram, &rhs).or_else(|_| {
            // Collinear, unpenalized features: add a tiny ridge.
            for a in 0..live.len() {
                gram[(a, a)] += 1e-8 * nf;
            }
            numerics::solve_linear(&gram, &rhs)
        })?;
        for (a, &k) in live.iter().enumerate() {
            coef[k] = sol[a];
        }
    }
    Ok(FittedLearner::Ridge {
        intercept: ybar,
        coef,
        center,
        scale,
    })
}

/// Fits one learner on the rows of `x` (no intercept column).
pub fn fit_learner(spec: &LearnerSpec, x: &DMatrix<f64>, y: &[f64]) -> Result<FittedLearner> {
    if y.is_empty() {
        return Err(Error::Domain("cannot fit a learner on zero rows".into()));
    }
    match *spec {
        LearnerSpec::GlmIdentity | LearnerSpec::GlmLogit => {
            let link = if *spec == LearnerSpec::GlmLogit {
                Link::Logit
            } else {
                Link::Identity
            };
            let design = with_intercept(x);
            let fit = numerics::fit_glm_aliased(&design, y, link, &vec![1.0; y.len()])?;
            if fit.status == numerics::GlmStatus::NotConverged {
                return Err(Error::NonConvergence {
                    stage: "learner GLM".into(),
                    iterations: fit.iterations,
                });
            }
            Ok(FittedLearner::Glm(fit))
        }
        LearnerSpec::Ridge { lambda } => fit_ridge(x, y, lambda),
        LearnerSpec::Tree { max_depth, min_leaf } => {
            Ok(FittedLearner::Tree(tree::fit_tree(x, y, max_depth, min_leaf)))
        }
    }
}
