//! Golden-file tests for the two stable output formats: the analyze result
//! JSON and the simulate metrics CSV with its manifest.
//!
//! Set `UPDATE_GOLDEN=1` to rewrite the expected files after an intended
//! format or numerical change.

mod common;

use std::path::PathBuf;

use common::{run, stderr, tmp};

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn check(actual_path: &str, name: &str) {
    let actual = std::fs::read_to_string(actual_path).unwrap();
    let path = golden(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert_eq!(actual, expected, "output differs from {}", path.display());
}

fn analyze_case(name: &str, args: &[&str]) {
    let out = tmp(&format!("{name}.json"));
    let mut full = vec!["analyze"];
    full.extend_from_slice(args);
    full.extend_from_slice(&["--out", &out]);
    let o = run(&full);
    assert!(o.status.success(), "{}", stderr(&o));
    check(&out, &format!("{name}.json"));
}

#[test]
fn analyze_toy_unadjusted() {
    analyze_case("analyze_toy_unadjusted", &["--data", "tests/data/toy.csv", "--estimator", "unadjusted"]);
}

#[test]
fn analyze_gee_individual() {
    analyze_case(
        "analyze_gee_individual",
        &[
            "--data", "tests/data/scenario2.csv", "--estimator", "gee-g", "--estimand", "individual", "--cluster-covs",
            "c1,c2", "--indiv-covs", "x1,x2",
        ],
    );
}

#[test]
fn analyze_eff_pm_cluster() {
    analyze_case(
        "analyze_eff_pm_cluster",
        &["--data", "tests/data/scenario2.csv", "--estimator", "eff-pm", "--cluster-covs", "c1,c2", "--indiv-covs", "x1,x2"],
    );
}

#[test]
fn analyze_lmm_enrolled() {
    analyze_case(
        "analyze_lmm_enrolled",
        &["--data", "tests/data/scenario2.csv", "--estimator", "lmm-g", "--population", "enrolled", "--estimand", "individual"],
    );
}

#[test]
fn simulate_scenario1() {
    let out = tmp("simulate_scenario1.csv");
    let o = run(&[
        "simulate", "--scenario", "1", "--m", "30", "--replicates", "8", "--seed", "11", "--estimators",
        "unadjusted,gee-g,lmm-g,eff-pm", "--out", &out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    check(&out, "simulate_scenario1.csv");
    check(&clusterfx_cli::manifest_path(&out), "simulate_scenario1.json");
}
