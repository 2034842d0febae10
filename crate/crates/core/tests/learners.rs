mod common;

use approx::assert_abs_diff_eq;
use clusterfx::learners::tree::{best_split, fit_tree};
use clusterfx::learners::{fit_learner, fit_stacking_ensemble, LearnerSpec, Task};
use common::Lcg;
use nalgebra::DMatrix;
use proptest::prelude::*;

/// Tries every feature and every midpoint by brute force.
fn exhaustive_split(x: &DMatrix<f64>, y: &[f64], min_leaf: usize) -> Option<(usize, f64, f64)> {
    let n = y.len();
    let sse = |rows: &[usize]| {
        let mean = rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64;
        rows.iter().map(|&i| (y[i] - mean).powi(2)).sum::<f64>()
    };
    let mut best: Option<(usize, f64, f64)> = None;
    for f in 0..x.ncols() {
        let mut values: Vec<f64> = (0..n).map(|i| x[(i, f)]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let t = 0.5 * (w[0] + w[1]);
            let (l, r): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| x[(i, f)] <= t);
            if l.len() < min_leaf || r.len() < min_leaf {
                continue;
            }
            let s = sse(&l) + sse(&r);
            if best.map_or(true, |b| s < b.2 - 1e-9) {
                best = Some((f, t, s));
            }
        }
    }
    best
}

fn random_problem(rng: &mut Lcg, n: usize, p: usize, discrete: bool) -> (DMatrix<f64>, Vec<f64>) {
    let x = DMatrix::from_fn(n, p, |_, _| {
        let u = rng.normal();
        if discrete {
            (u * 2.0).round()
        } else {
            u
        }
    });
    let y = (0..n).map(|i| (x[(i, 0)] > 0.3) as u8 as f64 * 2.0 + 0.5 * rng.normal()).collect();
    (x, y)
}

#[test]
fn splits_match_exhaustive_search() {
    let mut rng = Lcg(42);
    for trial in 0..200 {
        let n = 5 + trial % 46;
        let p = 1 + trial % 4;
        let min_leaf = 1 + trial % 5;
        let (x, y) = random_problem(&mut rng, n, p, trial % 3 == 0);
        let idx: Vec<usize> = (0..n).collect();
        let fast = best_split(&x, &y, &idx, min_leaf);
        let slow = exhaustive_split(&x, &y, min_leaf);
        match (fast, slow) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                assert_abs_diff_eq!(a.2, b.2, epsilon = 1e-9 * b.2.max(1.0));
                // Continuous features have no ties, so the split itself agrees.
                if trial % 3 != 0 {
                    assert_eq!(a.0, b.0);
                    assert_eq!(a.1, b.1);
                }
            }
            other => panic!("trial {trial}: {other:?}"),
        }
    }
}

proptest! {
    #[test]
    fn split_sse_never_worse_than_oracle(
        n in 4usize..=50,
        seed in 0u64..10_000,
        min_leaf in 1usize..4,
    ) {
        let mut rng = Lcg(seed);
        let (x, y) = random_problem(&mut rng, n, 2, seed % 2 == 0);
        let idx: Vec<usize> = (0..n).collect();
        let fast = best_split(&x, &y, &idx, min_leaf);
        let slow = exhaustive_split(&x, &y, min_leaf);
        if let (Some(a), Some(b)) = (fast, slow) {
            prop_assert!((a.2 - b.2).abs() <= 1e-9 * b.2.max(1.0));
        } else {
            prop_assert_eq!(fast.is_none(), slow.is_none());
        }
    }
}

#[test]
fn tree_recovers_a_step_function() {
    let x = DMatrix::from_fn(40, 1, |i, _| i as f64);
    let y: Vec<f64> = (0..40).map(|i| if i < 17 { 1.0 } else { 4.0 }).collect();
    let t = fit_tree(&x, &y, 3, 2);
    assert_eq!(t.leaves(), 2);
    assert_eq!(t.predict(&[3.0]), 1.0);
    assert_eq!(t.predict(&[30.0]), 4.0);
    assert_eq!(t.predict(&[16.4]), 1.0);
}

#[test]
fn tree_respects_depth_and_leaf_size() {
    let mut rng = Lcg(3);
    let (x, y) = random_problem(&mut rng, 200, 3, false);
    for depth in 1..5 {
        let t = fit_tree(&x, &y, depth, 7);
        assert!(t.depth() <= depth);
        assert!(t.leaves() <= 1 << depth);
    }
}

#[test]
fn ridge_without_penalty_is_least_squares() {
    let mut rng = Lcg(8);
    let x = DMatrix::from_fn(60, 3, |_, _| rng.normal());
    let y: Vec<f64> = (0..60).map(|i| 1.0 + 2.0 * x[(i, 0)] - x[(i, 2)] + 0.1 * rng.normal()).collect();
    let ridge = fit_learner(&LearnerSpec::Ridge { lambda: 0.0 }, &x, &y).unwrap();
    let ols = fit_learner(&LearnerSpec::GlmIdentity, &x, &y).unwrap();
    for i in 0..60 {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        assert_abs_diff_eq!(ridge.predict(&row), ols.predict(&row), epsilon = 1e-9);
    }
}

#[test]
fn ridge_penalty_shrinks_slopes() {
    let mut rng = Lcg(9);
    let x = DMatrix::from_fn(50, 1, |_, _| rng.normal());
    let y: Vec<f64> = (0..50).map(|i| 3.0 * x[(i, 0)]).collect();
    let slope = |lambda: f64| {
        let f = fit_learner(&LearnerSpec::Ridge { lambda }, &x, &y).unwrap();
        f.predict(&[1.0]) - f.predict(&[0.0])
    };
    assert!(slope(100.0) < slope(1.0) && slope(1.0) < slope(0.0));
    assert_abs_diff_eq!(slope(0.0), 3.0, epsilon = 1e-9);
}

fn library() -> Vec<LearnerSpec> {
    LearnerSpec::default_library(false)
}

#[test]
fn stacking_prefers_the_right_learner() {
    let mut rng = Lcg(10);
    let x = DMatrix::from_fn(200, 2, |_, _| rng.normal());
    let linear: Vec<f64> = (0..200).map(|i| 2.0 * x[(i, 0)] + x[(i, 1)] + 0.05 * rng.normal()).collect();
    let fit = fit_stacking_ensemble(&x, &linear, None, &library(), 5, Task::Regression, 1).unwrap();
    assert!(fit.weights[2] < 0.1, "tree weight {:?}", fit.weights);
    assert_abs_diff_eq!(fit.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    assert!(fit.weights.iter().all(|&w| w >= 0.0));

    let step: Vec<f64> = (0..200).map(|i| if x[(i, 0)] > 0.0 { 5.0 } else { -5.0 }).collect();
    let fit = fit_stacking_ensemble(&x, &step, None, &library(), 5, Task::Regression, 1).unwrap();
    assert!(fit.weights[2] > 0.8, "tree weight {:?}", fit.weights);
}

#[test]
fn stacking_on_constant_target_is_constant() {
    let x = DMatrix::from_fn(30, 2, |i, k| (i * (k + 1)) as f64);
    let y = vec![0.25; 30];
    let fit = fit_stacking_ensemble(&x, &y, None, &library(), 5, Task::Regression, 1).unwrap();
    assert_eq!(fit.predict(&[100.0, -3.0]), 0.25);
}

#[test]
fn stacking_is_seed_deterministic_and_respects_groups() {
    let mut rng = Lcg(11);
    let x = DMatrix::from_fn(120, 2, |_, _| rng.normal());
    let y: Vec<f64> = (0..120).map(|i| x[(i, 0)].sin() + 0.3 * rng.normal()).collect();
    let groups: Vec<usize> = (0..120).map(|i| i / 6).collect();
    let a = fit_stacking_ensemble(&x, &y, Some(&groups), &library(), 5, Task::Regression, 4).unwrap();
    let b = fit_stacking_ensemble(&x, &y, Some(&groups), &library(), 5, Task::Regression, 4).unwrap();
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.predict(&[0.3, 0.1]), b.predict(&[0.3, 0.1]));
}

#[test]
fn probability_predictions_are_clamped() {
    let x = DMatrix::from_fn(80, 1, |i, _| i as f64);
    let y: Vec<f64> = (0..80).map(|i| if i < 40 { 0.0 } else { 1.0 }).collect();
    let lib = vec![LearnerSpec::Tree { max_depth: 2, min_leaf: 5 }];
    let fit = fit_stacking_ensemble(&x, &y, None, &lib, 5, Task::Probability, 1).unwrap();
    let p = fit.predict(&[0.0]);
    assert!(p >= 0.01 && p <= 0.99);
    assert!(fit_stacking_ensemble(&x, &y, None, &[], 5, Task::Regression, 1).is_err());
}
