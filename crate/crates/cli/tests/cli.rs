mod common;

use clusterfx_cli::{CliError, EXIT_NON_CONVERGENCE, EXIT_TOO_MANY_FAILURES, EXIT_VALIDATION};
use common::{json, run, stderr, tmp};

#[test]
fn toy_unadjusted_matches_hand_computation() {
    // Treated cluster means 3 and 1, control 1 and 2: delta = 2 - 1.5.
    // Variance sum_a sum_i (Ybar_i - Ybar_a)^2 / m_a^2 * m / (m - 2)
    //   = ((1 + 1) / 4 + (0.25 + 0.25) / 4) * 2 = 1.25.
    let out = tmp("toy.json");
    let o = run(&["analyze", "--data", "tests/data/toy.csv", "--estimator", "unadjusted", "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = &json(&out)["result"];
    assert!((r["delta"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    // The bread is a numeric Jacobian, so the variance is exact to ~1e-10.
    assert!((r["variance"].as_f64().unwrap() - 1.25).abs() < 1e-9);
    assert_eq!(r["dof"].as_u64(), Some(2));
}

#[test]
fn missing_column_exits_two_and_names_it() {
    let o = run(&["analyze", "--data", "tests/data/toy.csv", "--outcome-col", "y_missing"]);
    assert_eq!(o.status.code(), Some(EXIT_VALIDATION));
    assert!(stderr(&o).contains("y_missing"));
}

#[test]
fn invalid_value_reports_row_and_column() {
    let path = tmp("bad.csv");
    std::fs::write(&path, "cluster_id,treatment,outcome,source_size\na,1,2,5\na,1,x,5\nb,1,1,3\nc,0,0,4\nd,0,2,4\n")
        .unwrap();
    let o = run(&["analyze", "--data", &path]);
    assert_eq!(o.status.code(), Some(EXIT_VALIDATION));
    let err = stderr(&o);
    assert!(err.contains("row 3") && err.contains("outcome"), "{err}");
}

#[test]
fn config_errors_exit_two_with_location() {
    let path = tmp("bad.toml");
    std::fs::write(&path, "estimator = \"eff-pm\"\nfolds = 3\n").unwrap();
    let o = run(&["analyze", "--config", &path]);
    assert_eq!(o.status.code(), Some(EXIT_VALIDATION));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let o = run(&["analyze", "--data", "tests/data/toy.csv", "--measure", "log-odds"]);
    assert_eq!(o.status.code(), Some(EXIT_VALIDATION));
    let o = run(&["analyze", "--data", "tests/data/toy.csv", "--estimand", "individual", "--population", "unknown-n"]);
    assert_eq!(o.status.code(), Some(EXIT_VALIDATION));
}

#[test]
fn zero_replicates_exits_two() {
    let o = run(&["simulate", "--replicates", "0"]);
    assert_eq!(o.status.code(), Some(EXIT_VALIDATION));
}

#[test]
fn frequent_failures_exit_four() {
    // With 4 clusters most replicates leave an arm with fewer than two.
    let o = run(&["simulate", "--m", "4", "--replicates", "20", "--estimators", "unadjusted"]);
    assert_eq!(o.status.code(), Some(EXIT_TOO_MANY_FAILURES), "{}", stderr(&o));
}

#[test]
fn error_kinds_map_to_exit_codes() {
    let code = |e: clusterfx::Error| CliError::from(e).code;
    assert_eq!(
        code(clusterfx::Error::NonConvergence {
            stage: "GEE".into(),
            iterations: 100
        }),
        EXIT_NON_CONVERGENCE
    );
    assert_eq!(code(clusterfx::Error::MissingColumn("y".into())), EXIT_VALIDATION);
    assert_eq!(code(clusterfx::Error::RankDeficientDesign("x".into())), EXIT_VALIDATION);
    assert_eq!(
        code(clusterfx::Error::TooManyFailures {
            estimator: "GEE-g".into(),
            failed: 9,
            total: 10
        }),
        EXIT_TOO_MANY_FAILURES
    );
}

#[test]
fn few_clusters_per_fold_warns_and_proceeds() {
    let out = tmp("eight.json");
    let o = run(&[
        "analyze", "--data", "tests/data/eight.csv", "--estimator", "eff-ml", "--folds", "5", "--cluster-covs", "c1,c2",
        "--indiv-covs", "x1,x2", "--out", &out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("m/K < 10"));
    let warnings = json(&out)["result"]["warnings"].to_string();
    assert!(warnings.contains("m/K < 10"));
}

#[test]
fn intercept_only_eff_pm_equals_unadjusted() {
    let a = tmp("io_pm.json");
    let b = tmp("io_un.json");
    assert!(run(&["analyze", "--config", "tests/data/intercept_only.toml", "--out", &a]).status.success());
    assert!(run(&["analyze", "--data", "tests/data/scenario2.csv", "--estimator", "unadjusted", "--out", &b])
        .status
        .success());
    let pm = json(&a)["result"]["delta"].as_f64().unwrap();
    let un = json(&b)["result"]["delta"].as_f64().unwrap();
    assert!((pm - un).abs() < 1e-10, "{pm} vs {un}");
}

#[test]
fn embedded_config_reruns_bit_exactly() {
    for estimator in ["gee-g", "eff-ml"] {
        let first = tmp(&format!("first_{estimator}.json"));
        let second = tmp(&format!("second_{estimator}.json"));
        let o = run(&[
            "analyze", "--data", "tests/data/scenario2.csv", "--estimator", estimator, "--cluster-covs", "c1,c2",
            "--indiv-covs", "x1,x2", "--estimand", "individual", "--seed", "9", "--out", &first,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(run(&["analyze", "--config", &first, "--out", &second]).status.success());
        assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
        let doc = json(&first);
        assert_eq!(doc["version"], env!("CARGO_PKG_VERSION"));
        assert_eq!(doc["config"]["estimator"], estimator);
    }
}

#[test]
fn flags_override_config_file() {
    let out = tmp("override.json");
    let o = run(&["analyze", "--config", "tests/data/intercept_only.toml", "--estimator", "gee-g", "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc = json(&out);
    assert_eq!(doc["config"]["estimator"], "gee-g");
    assert_eq!(doc["config"]["settings"]["intercept_only_nuisances"], true);
}

#[test]
fn simulate_writes_one_row_per_estimator_and_estimand() {
    let out = tmp("shape.csv");
    let o = run(&["simulate", "--scenario", "1", "--m", "30", "--replicates", "10", "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 2);
    let manifest = json(&clusterfx_cli::manifest_path(&out));
    assert_eq!(manifest["config"]["replicates"], 10);
    assert!(String::from_utf8_lossy(&o.stdout).contains("Eff-PM"));
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let mut outputs = Vec::new();
    for workers in ["1", "3"] {
        let out = tmp(&format!("workers{workers}.csv"));
        let o = run(&[
            "simulate", "--scenario", "2", "--m", "30", "--replicates", "6", "--seed", "5", "--workers", workers,
            "--out", &out,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let json_path = clusterfx_cli::manifest_path(&out);
        outputs.push((std::fs::read(&out).unwrap(), std::fs::read(json_path).unwrap()));

        let res = tmp(&format!("analyze{workers}.json"));
        let o = run(&[
            "analyze", "--data", "tests/data/scenario2.csv", "--estimator", "eff-ml", "--workers", workers, "--out", &res,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push((std::fs::read(&res).unwrap(), Vec::new()));
    }
    assert_eq!(outputs[0], outputs[2]);
    assert_eq!(outputs[1], outputs[3]);
}

#[test]
fn generate_is_deterministic() {
    let a = run(&["generate", "--scenario", "4", "--m", "12", "--seed", "3"]);
    let b = run(&["generate", "--scenario", "4", "--m", "12", "--seed", "3"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert!(text.starts_with("cluster_id,treatment,outcome,source_size,c1,c2,x1,x2\n"));
}
