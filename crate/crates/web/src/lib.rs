//! Browser bindings for clusterfx.
//!
//! Three operations, each taking and returning JSON (or CSV) text so the
//! page needs no glue beyond `JSON.parse`:
//!
//! * [`analyze`]: estimate a treatment effect from CSV text.
//! * [`simulate`]: run a small Monte-Carlo study of one scenario.
//! * [`generate`]: draw one simulated dataset as CSV.
//!
//! The `*_json` functions hold the logic and are plain Rust so they can be
//! tested natively; the `#[wasm_bindgen]` wrappers only convert errors.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use clusterfx::simulator::{generate_dataset, run_monte_carlo, summary_table, Experiment, MetricsRow, ScenarioConfig};
use clusterfx::{
    run_estimator, validate_dataset, ColumnSchema, EstimandSpec, EstimateResult, EstimatorSettings, EstimatorTag,
    Level, Measure, PopulationMode, RawTable,
};

/// Replicate cap for in-browser studies; the page runs on one thread.
pub const MAX_BROWSER_REPLICATES: usize = 500;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeOptions {
    pub estimator: EstimatorTag,
    pub level: Level,
    pub measure: Measure,
    pub population: PopulationMode,
    pub pi: f64,
    pub cluster_covariates: Vec<String>,
    pub indiv_covariates: Vec<String>,
    pub seed: u64,
    pub folds: usize,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        let settings = EstimatorSettings::default();
        Self {
            estimator: EstimatorTag::EffPm,
            level: Level::Cluster,
            measure: Measure::Difference,
            population: PopulationMode::Source,
            pi: 0.5,
            cluster_covariates: Vec::new(),
            indiv_covariates: Vec::new(),
            seed: settings.seed,
            folds: settings.folds,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateOptions {
    pub experiment: Experiment,
    pub scenario: u8,
    pub m: Option<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorTag>,
    pub levels: Vec<Level>,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            experiment: Experiment::Continuous,
            scenario: 1,
            m: None,
            replicates: 50,
            seed: 1,
            estimators: vec![EstimatorTag::Unadjusted, EstimatorTag::GeeG, EstimatorTag::EffPm],
            levels: vec![Level::Cluster, Level::Individual],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateOptions {
    pub experiment: Experiment,
    pub scenario: u8,
    pub m: Option<usize>,
    pub seed: u64,
    pub replicate: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            experiment: Experiment::Continuous,
            scenario: 1,
            m: None,
            seed: 1,
            replicate: 0,
        }
    }
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    rows: &'a [MetricsRow],
    first_errors: &'a [Option<String>],
    table: String,
}

fn options<T: Default + for<'de> Deserialize<'de>>(json: &str) -> Result<T, String> {
    if json.trim().is_empty() {
        return Ok(T::default());
    }
    serde_json::from_str(json).map_err(|e| format!("invalid options: {e}"))
}

fn scenario(experiment: Experiment, number: u8, m: Option<usize>, seed: u64, replicates: usize) -> Result<ScenarioConfig, String> {
    let mut cfg = ScenarioConfig::new(experiment, number, seed, replicates).map_err(|e| e.to_string())?;
    if let Some(m) = m {
        cfg.m = m;
        cfg.validate().map_err(|e| e.to_string())?;
    }
    Ok(cfg)
}

pub fn analyze_json(csv: &str, options_json: &str) -> Result<String, String> {
    let opts: AnalyzeOptions = options(options_json)?;
    let table = RawTable::from_csv(csv.as_bytes()).map_err(|e| e.to_string())?;
    let schema = ColumnSchema {
        cluster_covariates: opts.cluster_covariates.clone(),
        indiv_covariates: opts.indiv_covariates.clone(),
        ..ColumnSchema::default()
    };
    let ds = validate_dataset(&table, &schema, opts.population, opts.pi).map_err(|e| e.to_string())?;
    let spec = EstimandSpec::new(opts.level, opts.measure, opts.population).map_err(|e| e.to_string())?;
    let settings = EstimatorSettings {
        seed: opts.seed,
        folds: opts.folds,
        ..EstimatorSettings::default()
    };
    let result: EstimateResult = run_estimator(opts.estimator, &ds, &spec, &settings).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&result).expect("result serializes"))
}

pub fn simulate_json(options_json: &str) -> Result<String, String> {
    let opts: SimulateOptions = options(options_json)?;
    if opts.replicates > MAX_BROWSER_REPLICATES {
        return Err(format!(
            "at most {MAX_BROWSER_REPLICATES} replicates run in the browser; use the command-line tool for more"
        ));
    }
    let cfg = scenario(opts.experiment, opts.scenario, opts.m, opts.seed, opts.replicates)?;
    let settings = EstimatorSettings {
        seed: opts.seed,
        ..EstimatorSettings::default()
    };
    let report = run_monte_carlo(&cfg, &opts.estimators, &opts.levels, &settings).map_err(|e| e.to_string())?;
    let out = SimulateReport {
        rows: &report.rows,
        first_errors: &report.first_errors,
        table: summary_table(&report),
    };
    Ok(serde_json::to_string(&out).expect("report serializes"))
}

pub fn generate_csv(options_json: &str) -> Result<String, String> {
    let opts: GenerateOptions = options(options_json)?;
    let cfg = scenario(opts.experiment, opts.scenario, opts.m, opts.seed, 1)?;
    let ds = generate_dataset(&cfg, opts.replicate).map_err(|e| e.to_string())?;
    let schema = ColumnSchema {
        cluster_covariates: ds.cluster_covariate_names.clone(),
        indiv_covariates: ds.indiv_covariate_names.clone(),
        ..ColumnSchema::default()
    };
    Ok(ds.to_table(&schema).to_csv())
}

/// Estimate from CSV text; returns the result as JSON.
#[wasm_bindgen]
pub fn analyze(csv: &str, options: &str) -> Result<String, JsError> {
    analyze_json(csv, options).map_err(|e| JsError::new(&e))
}

/// Small Monte-Carlo study; returns metric rows and a text table as JSON.
#[wasm_bindgen]
pub fn simulate(options: &str) -> Result<String, JsError> {
    simulate_json(options).map_err(|e| JsError::new(&e))
}

/// One simulated dataset as CSV.
#[wasm_bindgen]
pub fn generate(options: &str) -> Result<String, JsError> {
    generate_csv(options).map_err(|e| JsError::new(&e))
}
