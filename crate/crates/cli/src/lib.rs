//! Library side of the `clusterfx` command-line tool.
//!
//! `main.rs` only parses flags; everything that touches data lives here so
//! the commands can be tested in-process.

pub mod config;

use std::fmt;
use std::fs::File;
use std::path::Path;

use clusterfx::simulator::{
    generate_dataset, metrics_csv, run_monte_carlo, summary_table, Experiment, MetricsRow, ScenarioConfig,
};
use clusterfx::{
    run_estimator, validate_dataset, ColumnSchema, EstimandSpec, EstimateResult, EstimatorTag, RawTable,
};
use serde::Serialize;

pub use config::{AnalyzeConfig, EstimandConfig, SimulateConfig};

pub const TOOL: &str = "clusterfx";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NON_CONVERGENCE: i32 = 3;
pub const EXIT_TOO_MANY_FAILURES: i32 = 4;
pub const EXIT_IO: i32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<clusterfx::Error> for CliError {
    fn from(e: clusterfx::Error) -> Self {
        let code = match e {
            clusterfx::Error::TooManyFailures { .. } => EXIT_TOO_MANY_FAILURES,
            ref e if e.is_convergence_failure() => EXIT_NON_CONVERGENCE,
            _ => EXIT_VALIDATION,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

/// Runs `f` on a pool of `workers` threads (0 = all available cores).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::io(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Serialize)]
pub struct AnalyzeDocument<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: &'a AnalyzeConfig,
    pub result: &'a EstimateResult,
}

#[derive(Debug, Serialize)]
pub struct SimulateDocument<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: &'a SimulateConfig,
    pub metrics: &'a [MetricsRow],
    /// First failure message of each metrics row, if any replicate failed.
    pub first_errors: &'a [Option<String>],
}

fn read_table(path: &str) -> Result<RawTable, CliError> {
    let file = File::open(path).map_err(|e| CliError::validation(format!("cannot open data file `{path}`: {e}")))?;
    RawTable::from_csv(file).map_err(|e| CliError::validation(format!("{path}: {e}")))
}

/// Replaces data-dependent defaults by the values actually used, so the
/// embedded config reruns identically even if defaults change.
fn resolve(cfg: &mut AnalyzeConfig, ds: &clusterfx::TrialDataset, spec: &EstimandSpec) {
    let s = &mut cfg.settings;
    match cfg.estimator {
        EstimatorTag::GeeG => {
            let gee = s.gee_spec(ds, spec);
            s.gee_link = Some(gee.link);
            s.gee_correlation = Some(gee.correlation);
            s.gee_weights = Some(gee.weights);
        }
        EstimatorTag::EffMl => {
            let lib = s.crossfit(ds).library;
            s.eta_learners = Some(lib.eta);
            s.zeta_learners = Some(lib.zeta);
            s.kappa_learners = Some(lib.kappa);
        }
        _ => {}
    }
}

/// Outcome of `analyze`: the resolved config, the estimate and the JSON
/// document that was (or would be) written.
pub struct AnalyzeOutput {
    pub config: AnalyzeConfig,
    pub result: EstimateResult,
    pub document: String,
}

pub fn analyze(mut cfg: AnalyzeConfig, workers: usize) -> Result<AnalyzeOutput, CliError> {
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| CliError::validation("no data file given (use --data or `data` in the config)"))?;
    let table = read_table(&data)?;
    let ds = validate_dataset(&table, &cfg.columns, cfg.estimand.population, cfg.pi)
        .map_err(|e| CliError::validation(format!("{data}: {e}")))?;
    let spec = EstimandSpec::new(cfg.estimand.level, cfg.estimand.measure, cfg.estimand.population)?;
    resolve(&mut cfg, &ds, &spec);
    let result = with_workers(workers, || run_estimator(cfg.estimator, &ds, &spec, &cfg.settings))??;
    let doc = AnalyzeDocument {
        tool: TOOL,
        version: VERSION,
        command: "analyze",
        config: &cfg,
        result: &result,
    };
    let document = serde_json::to_string_pretty(&doc).expect("result serializes") + "\n";
    Ok(AnalyzeOutput {
        config: cfg,
        result,
        document,
    })
}

pub struct SimulateOutput {
    pub csv: String,
    pub summary: String,
    pub document: String,
}

pub fn scenario_config(cfg: &SimulateConfig) -> Result<ScenarioConfig, CliError> {
    let mut sc = ScenarioConfig::new(cfg.experiment, cfg.scenario, cfg.seed, cfg.replicates)?;
    if let Some(m) = cfg.m {
        sc.m = m;
        sc.validate()?;
    }
    Ok(sc)
}

pub fn simulate(cfg: SimulateConfig, workers: usize) -> Result<SimulateOutput, CliError> {
    let sc = scenario_config(&cfg)?;
    let report = with_workers(workers, || run_monte_carlo(&sc, &cfg.estimators, &cfg.levels, &cfg.settings))??;
    let doc = SimulateDocument {
        tool: TOOL,
        version: VERSION,
        command: "simulate",
        config: &cfg,
        metrics: &report.rows,
        first_errors: &report.first_errors,
    };
    Ok(SimulateOutput {
        csv: metrics_csv(&report),
        summary: summary_table(&report),
        document: serde_json::to_string_pretty(&doc).expect("report serializes") + "\n",
    })
}

/// One simulated replicate as an individual-level CSV with the default
/// column names (`c1`, `c2` cluster covariates; `x1`, `x2` individual).
pub fn generate_csv(experiment: Experiment, scenario: u8, m: Option<usize>, seed: u64, replicate: u64) -> Result<String, CliError> {
    let mut sc = ScenarioConfig::new(experiment, scenario, seed, 1)?;
    if let Some(m) = m {
        sc.m = m;
        sc.validate()?;
    }
    let ds = generate_dataset(&sc, replicate)?;
    let schema = ColumnSchema {
        cluster_covariates: ds.cluster_covariate_names.clone(),
        indiv_covariates: ds.indiv_covariate_names.clone(),
        ..ColumnSchema::default()
    };
    Ok(ds.to_table(&schema).to_csv())
}

pub fn write_file(path: &str, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(format!("cannot write `{path}`: {e}")))
}

/// Path of the JSON manifest written next to a metrics CSV.
pub fn manifest_path(csv: &str) -> String {
    Path::new(csv).with_extension("json").to_string_lossy().into_owned()
}
