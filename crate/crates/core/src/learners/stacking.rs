use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{fit_learner, FittedLearner, LearnerSpec, Task, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::numerics;

pub const INNER_FOLDS: usize = 5;

/// Convex combination of learners refit on all rows.
#[derive(Debug, Clone)]
pub struct StackedPredictor {
    pub learners: Vec<FittedLearner>,
    pub weights: Vec<f64>,
    pub task: Task,
    /// Cross-validated mean squared error of each learner.
    pub cv_mse: Vec<f64>,
}

impl StackedPredictor {
    pub fn constant(value: f64, task: Task) -> Self {
        Self {
            learners: vec![FittedLearner::Constant(value)],
            weights: vec![1.0],
            task,
            cv_mse: vec![0.0],
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        let raw: f64 = self
            .learners
            .iter()
            .zip(&self.weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(l, w)| w * l.predict(row))
            .sum();
        match self.task {
            Task::Regression => raw,
            Task::Probability => raw.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR),
        }
    }
}

fn rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |i, k| x[(idx[i], k)])
}

/// Stacks `specs` by non-negative least squares on inner cross-validated
/// predictions.
///
/// `groups` assigns rows to clusters; inner folds never split a group, so
/// the validation rows of a fold share no cluster with its training rows.
/// With fewer than `2 * folds_inner` groups the fold count shrinks (to no
/// fewer than 2); with fewer than 4 groups the first learner is used alone.
pub fn fit_stacking_ensemble(
    x: &DMatrix<f64>,
    y: &[f64],
    groups: Option<&[usize]>,
    specs: &[LearnerSpec],
    folds_inner: usize,
    task: Task,
    seed: u64,
) -> Result<StackedPredictor> {
    if specs.is_empty() {
        return Err(Error::Config("the learner library is empty".into()));
    }
    for s in specs {
        s.validate()?;
    }
    let n = y.len();
    if n == 0 {
        return Err(Error::Domain("no training rows".into()));
    }
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo <= 1e-12 * lo.abs().max(1.0) {
        return Ok(StackedPredictor::constant(y[0], task));
    }

    let group_of: Vec<usize> = match groups {
        Some(g) => g.to_vec(),
        None => (0..n).collect(),
    };
    let mut ids = group_of.clone();
    ids.sort_unstable();
    ids.dedup();
    let n_groups = ids.len();
    if n_groups < 4 {
        let only = fit_learner(&specs[0], x, y)?;
        return Ok(StackedPredictor {
            learners: vec![only],
            weights: vec![1.0],
            task,
            cv_mse: vec![f64::NAN],
        });
    }
    let folds = folds_inner.min(n_groups / 2).max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let fold_of_group: std::collections::HashMap<usize, usize> =
        ids.iter().enumerate().map(|(k, &g)| (g, k % folds)).collect();
    let fold_of: Vec<usize> = group_of.iter().map(|g| fold_of_group[g]).collect();

    let l = specs.len();
    let mut cv = DMatrix::zeros(n, l);
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        let xt = rows(x, &train);
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let xv = rows(x, &test);
        for (k, spec) in specs.iter().enumerate() {
            let pred = match fit_learner(spec, &xt, &yt) {
                Ok(fit) => fit.predict_all(&xv),
                // A learner that cannot be fit on this split predicts the
                // training mean, which the combiner will down-weight.
                Err(_) => vec![yt.iter().sum::<f64>() / yt.len() as f64; test.len()],
            };
            for (r, &i) in test.iter().enumerate() {
                cv[(i, k)] = match task {
                    Task::Regression => pred[r],
                    Task::Probability => pred[r].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR),
                };
            }
        }
    }
    let cv_mse: Vec<f64> = (0..l)
        .map(|k| (0..n).map(|i| (cv[(i, k)] - y[i]).powi(2)).sum::<f64>() / n as f64)
        .collect();
    let raw = numerics::nnls(&cv, &DVector::from_column_slice(y));
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = if total > 0.0 && total.is_finite() {
        raw.iter().map(|w| w / total).collect()
    } else {
        let best = (0..l).fold(0, |b, k| if cv_mse[k] < cv_mse[b] { k } else { b });
        (0..l).map(|k| if k == best { 1.0 } else { 0.0 }).collect()
    };

    let mut learners = Vec::with_capacity(l);
    for (spec, &w) in specs.iter().zip(&weights) {
        learners.push(if w > 0.0 {
            fit_learner(spec, x, y)?
        } else {
            FittedLearner::Constant(0.0)
        });
    }
    Ok(StackedPredictor {
        learners,
        weights,
        task,
        cv_mse,
    })
}
