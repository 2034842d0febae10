mod common;

use approx::assert_abs_diff_eq;
use clusterfx::efficient::{
    arm_means, compute_score, estimate_eff_ml, estimate_eff_pm, estimate_unadjusted, scores, variance_eff_ml,
    CrossFitOptions, EffScore, MlCentering,
};
use clusterfx::learners::LearnerSpec;
use clusterfx::nuisance::{
    efficient_score, fit_crossfit_nuisances, fit_parametric_nuisances, fold_partition, LearnerLibrary,
    NuisanceModels,
};
use clusterfx::simulator::Experiment;
use clusterfx::{EstimandSpec, Level, Measure, PopulationMode};
use common::simulated;

#[test]
fn score_examples() {
    assert_abs_diff_eq!(efficient_score(1, 1, 2.0, 1.0, 1.0, 0.5, 0.5), 3.0, epsilon = 1e-15);
    assert_abs_diff_eq!(efficient_score(1, 1, 2.0, 1.8, 1.2, 0.6, 0.5), 2.32, epsilon = 1e-12);
    // Untreated cluster scored for arm 1 with kappa = pi_1 collapses to eta.
    assert_abs_diff_eq!(efficient_score(0, 1, 7.0, 1.7, 0.4, 0.3, 0.3), 1.7, epsilon = 1e-12);
    let ds = simulated(Experiment::Continuous, 1, 10, 1, 0);
    let c = &ds.clusters[0];
    let expected = efficient_score(c.treatment, 0, c.mean_outcome(), 1.0, 2.0, 0.4, 0.5);
    assert_eq!(compute_score(c, 0, 1.0, 2.0, 0.4, 0.5), expected);
}

#[test]
fn constant_nuisances_reproduce_unadjusted() {
    for (experiment, scenario) in [(Experiment::Continuous, 4), (Experiment::Binary, 2)] {
        let ds = simulated(experiment, scenario, 60, 3, 0);
        for level in [Level::Cluster, Level::Individual] {
            let est = EstimandSpec::new(level, experiment.measure(), PopulationMode::Source).unwrap();
            let pm = estimate_eff_pm(&ds, &est, &NuisanceModels::intercept_only(), 0.95).unwrap();
            let un = estimate_unadjusted(&ds, &est, 0.95).unwrap();
            assert_abs_diff_eq!(pm.delta, un.delta, epsilon = 1e-10);
            assert_abs_diff_eq!(pm.mu1, un.mu1, epsilon = 1e-10);
            assert_abs_diff_eq!(pm.mu0, un.mu0, epsilon = 1e-10);
        }
    }
}

#[test]
fn unadjusted_is_difference_of_arm_means() {
    let ds = simulated(Experiment::Continuous, 3, 40, 8, 0);
    let un = estimate_unadjusted(&ds, &EstimandSpec::cluster_difference(), 0.95).unwrap();
    let arm = |a: u8| {
        let v: Vec<f64> = ds.clusters.iter().filter(|c| c.treatment == a).map(|c| c.mean_outcome()).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert_abs_diff_eq!(un.delta, arm(1) - arm(0), epsilon = 1e-10);
}

#[test]
fn intercept_only_sandwich_is_two_sample_variance() {
    // With eta = zeta = arm mean and kappa = arm share the stacked sandwich
    // reduces to sum_a sum_{i in a} (Ybar_i - Ybar_a)^2 / m_a^2.
    let ds = simulated(Experiment::Continuous, 2, 51, 4, 0);
    let pm = estimate_eff_pm(&ds, &EstimandSpec::cluster_difference(), &NuisanceModels::unadjusted(), 0.95).unwrap();
    let m = ds.m() as f64;
    let mut acc = 0.0;
    for a in [1u8, 0] {
        let ys: Vec<f64> = ds.clusters.iter().filter(|c| c.treatment == a).map(|c| c.mean_outcome()).collect();
        let ma = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / ma;
        acc += ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (ma * ma);
    }
    let oracle = acc * m / (m - 2.0);
    assert_abs_diff_eq!(pm.variance, oracle, epsilon = 1e-6 * oracle);
}

#[test]
fn balanced_arms_sandwich_matches_plug_in_variance() {
    let mut ds = simulated(Experiment::Continuous, 2, 50, 4, 0);
    for (i, c) in ds.clusters.iter_mut().enumerate() {
        c.treatment = (i % 2) as u8;
    }
    let pm = estimate_eff_pm(&ds, &EstimandSpec::cluster_difference(), &NuisanceModels::unadjusted(), 0.95).unwrap();
    let nf = fit_parametric_nuisances(&ds, Level::Cluster, &NuisanceModels::unadjusted(), false).unwrap();
    let sc = scores(&ds, &nf, Level::Cluster).unwrap();
    let mu = arm_means(&sc);
    let plug = variance_eff_ml(&sc, &vec![0; ds.m()], 1, Measure::Difference, mu, MlCentering::FoldRatio).unwrap();
    assert_abs_diff_eq!(pm.variance, plug, epsilon = 1e-6 * plug);
}

#[test]
fn variance_formula_examples() {
    let flat = vec![
        EffScore {
            d1: 2.0,
            d0: 1.0,
            n_weight: 1.0
        };
        6
    ];
    let v = variance_eff_ml(&flat, &[0, 0, 0, 1, 1, 1], 2, Measure::Difference, (2.0, 1.0), MlCentering::FoldRatio)
        .unwrap();
    assert_eq!(v, 0.0);

    let sc: Vec<EffScore> = [(1.0, 0.5), (3.0, 0.0), (2.5, 1.5), (0.5, -1.0), (4.0, 2.0)]
        .iter()
        .map(|&(d1, d0)| EffScore { d1, d0, n_weight: 1.0 })
        .collect();
    let mu = arm_means(&sc);
    let v = variance_eff_ml(&sc, &[0; 5], 1, Measure::Difference, mu, MlCentering::FoldRatio).unwrap();
    let m = 5.0;
    let oracle = sc.iter().map(|s| (s.d1 - mu.0 - s.d0 + mu.1).powi(2)).sum::<f64>() / (m * m) * m / (m - 2.0);
    assert_abs_diff_eq!(v, oracle, epsilon = 1e-14);
}

#[test]
fn scores_average_to_arm_means() {
    let ds = simulated(Experiment::Continuous, 4, 50, 5, 0);
    for level in [Level::Cluster, Level::Individual] {
        let nf = fit_parametric_nuisances(&ds, level, &NuisanceModels::parametric_default(), false).unwrap();
        let sc = scores(&ds, &nf, level).unwrap();
        let (mu1, mu0) = arm_means(&sc);
        let total: f64 = sc.iter().map(|s| s.n_weight).sum();
        let centered: f64 = sc.iter().map(|s| s.n_weight * (s.d1 - mu1)).sum::<f64>() / total;
        assert!(centered.abs() < 1e-12);
        let centered: f64 = sc.iter().map(|s| s.n_weight * (s.d0 - mu0)).sum::<f64>() / total;
        assert!(centered.abs() < 1e-12);
    }
}

#[test]
fn equal_source_sizes_make_levels_agree() {
    let mut ds = simulated(Experiment::Continuous, 1, 40, 6, 0);
    for c in &mut ds.clusters {
        c.source_size = Some(30);
    }
    let models = NuisanceModels::intercept_only();
    let c = estimate_eff_pm(&ds, &EstimandSpec::cluster_difference(), &models, 0.95).unwrap();
    let est = EstimandSpec::new(Level::Individual, Measure::Difference, PopulationMode::Source).unwrap();
    let i = estimate_eff_pm(&ds, &est, &models, 0.95).unwrap();
    assert_abs_diff_eq!(c.delta, i.delta, epsilon = 1e-10);
}

#[test]
fn zeta_shift_cancels_when_kappa_is_pi() {
    let ds = simulated(Experiment::Continuous, 2, 30, 2, 0);
    let pi = ds.pi;
    let mean_for = |shift: f64| {
        let total: f64 = ds
            .clusters
            .iter()
            .map(|c| efficient_score(c.treatment, 1, c.mean_outcome(), 1.5, 0.7 + shift, pi, pi))
            .sum();
        total / ds.m() as f64
    };
    assert_abs_diff_eq!(mean_for(0.0), mean_for(3.0), epsilon = 1e-12);
}

#[test]
fn pm_and_single_glm_ml_agree_without_cross_fitting() {
    let ds = simulated(Experiment::Continuous, 3, 60, 7, 0);
    let est = EstimandSpec::cluster_difference();
    let models = NuisanceModels::parametric_default();
    let pm = estimate_eff_pm(&ds, &est, &models, 0.95).unwrap();
    let opts = CrossFitOptions {
        models,
        library: LearnerLibrary {
            eta: vec![LearnerSpec::GlmIdentity],
            zeta: vec![LearnerSpec::GlmIdentity],
            kappa: vec![LearnerSpec::GlmLogit],
        },
        folds: 1,
        seed: 1,
        centering: MlCentering::FoldRatio,
    };
    let ml = estimate_eff_ml(&ds, &est, &opts, 0.95).unwrap();
    assert_abs_diff_eq!(pm.delta, ml.delta, epsilon = 1e-6);
}

#[test]
fn cross_fitting_never_uses_a_clusters_own_outcome() {
    let ds = simulated(Experiment::Continuous, 2, 40, 9, 0);
    let models = NuisanceModels::machine_learning_default();
    let library = LearnerLibrary::default_for(false);
    let base = fit_crossfit_nuisances(&ds, 4, &models, &library, false, 13).unwrap();
    let folds = fold_partition(ds.m(), 4, 13);
    for target in [0usize, 17, 33] {
        let mut perturbed = ds.clone();
        perturbed.clusters[target].outcomes.iter_mut().for_each(|y| *y += 100.0);
        let other = fit_crossfit_nuisances(&perturbed, 4, &models, &library, false, 13).unwrap();
        assert_eq!(base.eta[target], other.eta[target]);
        assert_eq!(base.zeta[target], other.zeta[target]);
        // Some cluster outside the perturbed fold sees the change.
        let moved = (0..ds.m()).any(|i| folds[i] != folds[target] && base.eta[i] != other.eta[i]);
        assert!(moved);
    }
}

#[test]
fn fold_partition_is_balanced_and_deterministic() {
    for (m, k) in [(30usize, 3usize), (31, 3), (100, 5), (7, 7)] {
        let f = fold_partition(m, k, 99);
        let mut counts = vec![0usize; k];
        f.iter().for_each(|&x| counts[x] += 1);
        let lo = *counts.iter().min().unwrap();
        let hi = *counts.iter().max().unwrap();
        assert!(hi - lo <= 1, "{counts:?}");
        assert_eq!(counts.iter().sum::<usize>(), m);
        assert_eq!(f, fold_partition(m, k, 99));
    }
    assert_ne!(fold_partition(50, 5, 1), fold_partition(50, 5, 2));
}

#[test]
fn few_clusters_per_fold_warns() {
    let ds = simulated(Experiment::Continuous, 1, 40, 2, 0);
    let mut opts = CrossFitOptions::default_for(&ds, 3);
    opts.folds = 5;
    let r = estimate_eff_ml(&ds, &EstimandSpec::cluster_difference(), &opts, 0.95).unwrap();
    assert!(r.warnings.iter().any(|w| w.contains("m/K < 10")));
    opts.folds = 2;
    let r = estimate_eff_ml(&ds, &EstimandSpec::cluster_difference(), &opts, 0.95).unwrap();
    assert!(!r.warnings.iter().any(|w| w.contains("m/K < 10")));
}

#[test]
fn eight_clusters_five_folds_runs_with_warning() {
    let ds = simulated(Experiment::Continuous, 1, 8, 5, 0);
    let mut opts = CrossFitOptions::default_for(&ds, 3);
    opts.folds = 5;
    let r = estimate_eff_ml(&ds, &EstimandSpec::cluster_difference(), &opts, 0.95).unwrap();
    assert!(r.warnings.iter().any(|w| w.contains("m/K < 10")));
    assert!(r.delta.is_finite() && r.variance.is_finite());
}

#[test]
fn too_many_folds_is_a_config_error() {
    let ds = simulated(Experiment::Continuous, 1, 10, 2, 0);
    let mut opts = CrossFitOptions::default_for(&ds, 3);
    opts.folds = 11;
    assert!(estimate_eff_ml(&ds, &EstimandSpec::cluster_difference(), &opts, 0.95).is_err());
    opts.folds = 0;
    assert!(estimate_eff_ml(&ds, &EstimandSpec::cluster_difference(), &opts, 0.95).is_err());
}

#[test]
fn outcome_shift_leaves_difference_unchanged() {
    let ds = simulated(Experiment::Continuous, 4, 60, 10, 0);
    let mut shifted = ds.clone();
    for c in &mut shifted.clusters {
        c.outcomes.iter_mut().for_each(|y| *y += 4.0);
    }
    for level in [Level::Cluster, Level::Individual] {
        let est = EstimandSpec::new(level, Measure::Difference, PopulationMode::Source).unwrap();
        let models = NuisanceModels::parametric_default();
        let a = estimate_eff_pm(&ds, &est, &models, 0.95).unwrap();
        let b = estimate_eff_pm(&shifted, &est, &models, 0.95).unwrap();
        assert_abs_diff_eq!(b.mu1 - a.mu1, 4.0, epsilon = 1e-8);
        assert_abs_diff_eq!(a.delta, b.delta, epsilon = 1e-8);
    }
}

#[test]
fn unknown_sizes_restrict_to_cluster_level() {
    let mut ds = simulated(Experiment::Continuous, 1, 30, 1, 0);
    for c in &mut ds.clusters {
        c.source_size = None;
    }
    let ind = EstimandSpec::new(Level::Individual, Measure::Difference, PopulationMode::UnknownN);
    if let Ok(est) = ind {
        let models = NuisanceModels::parametric_default();
        assert!(estimate_eff_pm(&ds, &est, &models, 0.95).is_err());
    }
    let est = EstimandSpec::new(Level::Cluster, Measure::Difference, PopulationMode::UnknownN).unwrap();
    let r = estimate_eff_pm(&ds, &est, &NuisanceModels::parametric_default(), 0.95).unwrap();
    assert!(r.variance > 0.0 && r.variance.is_finite());
}

#[test]
fn identical_clusters_have_zero_variance() {
    let clusters = (0..10)
        .map(|i| {
            let a = (i % 2) as u8;
            common::bare(&format!("k{i}"), a, Some(20), if a == 1 { &[2.0, 2.0, 2.0] } else { &[1.0, 1.0] })
        })
        .collect();
    let ds = common::bare_dataset(clusters, 0.5);
    let r = estimate_eff_pm(&ds, &EstimandSpec::cluster_difference(), &NuisanceModels::intercept_only(), 0.95).unwrap();
    assert!(r.variance.abs() < 1e-20);
    assert_abs_diff_eq!(r.delta, 1.0, epsilon = 1e-12);
}
