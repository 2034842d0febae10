use clusterfx::data::*;
use clusterfx::Error;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;

fn table(headers: &[&str], rows: &[&[&str]]) -> RawTable {
    RawTable {
        headers: headers.iter().map(|s| s.to_string()).collect(),
        rows: rows
            .iter()
            .map(|r| r.iter().map(|s| s.to_string()).collect())
            .collect(),
    }
}

fn toy_rows() -> RawTable {
    table(
        &["cluster_id", "treatment", "outcome", "source_size", "c1", "x1"],
        &[
            &["a", "1", "2.0", "5", "0.5", "1"],
            &["a", "1", "3.0", "5", "0.5", "0"],
            &["a", "1", "4.0", "5", "0.5", "1"],
            &["b", "1", "1.0", "3", "1.5", "0"],
            &["c", "0", "0.0", "4", "2.0", "1"],
            &["d", "0", "1.0", "4", "2.5", "1"],
            &["d", "0", "2.0", "4", "2.5", "0"],
        ],
    )
}

fn toy_schema() -> ColumnSchema {
    ColumnSchema {
        cluster_covariates: vec!["c1".into()],
        indiv_covariates: vec!["x1".into()],
        ..ColumnSchema::default()
    }
}

#[test]
fn groups_rows_into_clusters() {
    let ds = validate_dataset(&toy_rows(), &toy_schema(), PopulationMode::Source, 0.5).unwrap();
    assert_eq!(ds.m(), 4);
    let a = &ds.clusters[0];
    assert_eq!((a.id.as_str(), a.observed_size(), a.source_size, a.treatment), ("a", 3, Some(5), 1));
    assert_eq!(a.x_row(1), &[0.0]);
    assert_abs_diff_eq!(a.mean_outcome(), 3.0);
}

#[test]
fn rejects_treatment_varying_within_cluster() {
    let mut t = toy_rows();
    t.rows[1][1] = "0".into();
    let err = validate_dataset(&t, &toy_schema(), PopulationMode::Source, 0.5).unwrap_err();
    assert!(matches!(err, Error::NonConstantWithinCluster { ref column, row: 3, .. } if column == "treatment"));
}

#[test]
fn rejects_cluster_covariate_varying_within_cluster() {
    let mut t = toy_rows();
    t.rows[2][4] = "0.7".into();
    let err = validate_dataset(&t, &toy_schema(), PopulationMode::Source, 0.5).unwrap_err();
    assert!(matches!(err, Error::NonConstantWithinCluster { ref column, .. } if column == "c1"));
}

#[test]
fn enrolled_mode_sets_source_size_to_row_count() {
    let t = table(
        &["cluster_id", "treatment", "outcome"],
        &[
            &["a", "1", "1"],
            &["a", "1", "2"],
            &["a", "1", "3"],
            &["a", "1", "4"],
            &["b", "1", "1"],
            &["c", "0", "1"],
            &["d", "0", "1"],
        ],
    );
    let schema = ColumnSchema {
        source_size: None,
        ..ColumnSchema::default()
    };
    let ds = validate_dataset(&t, &schema, PopulationMode::Enrolled, 0.5).unwrap();
    assert_eq!(ds.clusters[0].source_size, Some(4));
    let ds = validate_dataset(&t, &schema, PopulationMode::UnknownN, 0.5).unwrap();
    assert_eq!(ds.clusters[0].source_size, None);
}

#[test]
fn missing_value_and_column_errors() {
    let mut t = toy_rows();
    t.rows[4][2] = "".into();
    let err = validate_dataset(&t, &toy_schema(), PopulationMode::Source, 0.5).unwrap_err();
    assert_eq!(err, Error::MissingValue { row: 6, column: "outcome".into() });

    let schema = ColumnSchema {
        outcome: "y".into(),
        ..toy_schema()
    };
    let err = validate_dataset(&toy_rows(), &schema, PopulationMode::Source, 0.5).unwrap_err();
    assert_eq!(err, Error::MissingColumn("y".into()));
}

#[test]
fn empty_arm_is_rejected() {
    let mut t = toy_rows();
    t.rows.truncate(5); // only cluster c left in control
    let err = validate_dataset(&t, &toy_schema(), PopulationMode::Source, 0.5).unwrap_err();
    assert!(matches!(err, Error::EmptyArm { arm: 0, count: 1, .. }));
}

#[test]
fn source_size_below_observed_is_rejected() {
    let mut t = toy_rows();
    for r in 0..3 {
        t.rows[r][3] = "2".into();
    }
    assert!(validate_dataset(&t, &toy_schema(), PopulationMode::Source, 0.5).is_err());
}

#[test]
fn measure_examples() {
    assert_eq!(Measure::Difference.apply(6.0, 0.0).unwrap(), 6.0);
    assert_abs_diff_eq!(Measure::Ratio.apply(0.6, 0.3).unwrap(), 2.0, epsilon = 1e-15);
    assert_abs_diff_eq!(Measure::OddsRatio.apply(0.5, 0.5).unwrap(), 1.0);
    assert_eq!(Measure::Difference.gradient(3.0, -2.0).unwrap(), (1.0, -1.0));
    let (gx, gy) = Measure::Ratio.gradient(0.6, 0.3).unwrap();
    assert_abs_diff_eq!(gx, 10.0 / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(gy, -20.0 / 3.0, epsilon = 1e-12);
    assert!(Measure::Ratio.apply(1.0, 0.0).is_err());
    assert!(Measure::OddsRatio.apply(1.0, 0.5).is_err());
}

#[test]
fn odds_ratio_gradient_matches_finite_differences() {
    // Oracle: central differences of f(x, y) = x(1-y) / (y(1-x)) at (0.5, 0.5).
    let f = |x: f64, y: f64| x * (1.0 - y) / (y * (1.0 - x));
    let h = 1e-6;
    let dx = (f(0.5 + h, 0.5) - f(0.5 - h, 0.5)) / (2.0 * h);
    let dy = (f(0.5, 0.5 + h) - f(0.5, 0.5 - h)) / (2.0 * h);
    assert_abs_diff_eq!(dx, 4.0, epsilon = 1e-6);
    assert_abs_diff_eq!(dy, -4.0, epsilon = 1e-6);
    let (gx, gy) = Measure::OddsRatio.gradient(0.5, 0.5).unwrap();
    assert_abs_diff_eq!(gx, dx, epsilon = 1e-6);
    assert_abs_diff_eq!(gy, dy, epsilon = 1e-6);
}

#[test]
fn individual_level_needs_source_sizes() {
    assert_eq!(
        EstimandSpec::new(Level::Individual, Measure::Difference, PopulationMode::UnknownN),
        Err(Error::LevelUnavailable)
    );
}

/// Oracle for the t quantile: Simpson integration of the t density.
fn t_cdf_by_quadrature(t: f64, dof: f64) -> f64 {
    let ln_c = clusterfx::numerics::ln_gamma((dof + 1.0) / 2.0)
        - clusterfx::numerics::ln_gamma(dof / 2.0)
        - 0.5 * (dof * std::f64::consts::PI).ln();
    let dens = |x: f64| (ln_c - (dof + 1.0) / 2.0 * (1.0 + x * x / dof).ln()).exp();
    let n = 20_000;
    let h = t / n as f64;
    let mut s = dens(0.0) + dens(t);
    for k in 1..n {
        s += dens(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 + s * h / 3.0
}

#[test]
fn t_interval_examples() {
    let (lo, hi) = t_confidence_interval(0.0, 1.0, 100_000, 0.95);
    assert_abs_diff_eq!(hi, 1.96, epsilon = 1e-2);
    assert_abs_diff_eq!(lo, -hi, epsilon = 1e-12);
    assert_eq!(t_confidence_interval(5.0, 0.0, 10, 0.95), (5.0, 5.0));

    // Find the 0.975 point of the quadrature CDF by bisection, then compare.
    let (mut a, mut b) = (1.0, 4.0);
    for _ in 0..60 {
        let mid = 0.5 * (a + b);
        if t_cdf_by_quadrature(mid, 10.0) < 0.975 {
            a = mid;
        } else {
            b = mid;
        }
    }
    let oracle = 0.5 * (a + b);
    assert_abs_diff_eq!(oracle, 2.228, epsilon = 1e-3);
    let (_, hi) = t_confidence_interval(0.0, 1.0, 10, 0.95);
    assert_abs_diff_eq!(hi, oracle, epsilon = 1e-6);
}

proptest! {
    #[test]
    fn difference_is_antisymmetric(x in -1e6f64..1e6, y in -1e6f64..1e6) {
        let s = Measure::Difference.apply(x, y).unwrap() + Measure::Difference.apply(y, x).unwrap();
        prop_assert_eq!(s, 0.0);
    }

    #[test]
    fn gradients_match_central_differences(x in 0.05f64..0.95, y in 0.05f64..0.95) {
        for m in [Measure::Difference, Measure::Ratio, Measure::OddsRatio] {
            let h = 1e-6;
            let dx = (m.apply(x + h, y).unwrap() - m.apply(x - h, y).unwrap()) / (2.0 * h);
            let dy = (m.apply(x, y + h).unwrap() - m.apply(x, y - h).unwrap()) / (2.0 * h);
            let (gx, gy) = m.gradient(x, y).unwrap();
            prop_assert!((gx - dx).abs() <= 1e-6 * (1.0 + gx.abs()));
            prop_assert!((gy - dy).abs() <= 1e-6 * (1.0 + gy.abs()));
        }
    }

    #[test]
    fn validation_is_idempotent(seed in 0u64..200) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for k in 0..6 {
            let a = if k % 2 == 0 { "1" } else { "0" };
            let n = rng.random_range(3..8u32);
            let m = rng.random_range(1..=n);
            let c = rng.random_range(-2.0..2.0f64);
            for _ in 0..m {
                rows.push(vec![
                    format!("k{k}"), a.to_string(),
                    format!("{}", rng.random_range(-5.0..5.0f64)),
                    n.to_string(), format!("{c}"),
                    format!("{}", rng.random_range(0.0..1.0f64)),
                ]);
            }
        }
        let t = RawTable {
            headers: ["cluster_id", "treatment", "outcome", "source_size", "c1", "x1"]
                .iter().map(|s| s.to_string()).collect(),
            rows,
        };
        let schema = toy_schema();
        let ds = validate_dataset(&t, &schema, PopulationMode::Source, 0.5).unwrap();
        let again = validate_dataset(&ds.to_table(&schema), &schema, PopulationMode::Source, 0.5).unwrap();
        prop_assert_eq!(ds, again);
    }
}
