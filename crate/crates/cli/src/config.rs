//! Run configurations and how they are assembled.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, then
//! command-line flags. A config file is TOML, or JSON when its name ends in
//! `.json`; a JSON result document written by `analyze` or `simulate` is
//! accepted as well and its embedded `config` object is used.

use std::path::Path;

use clusterfx::simulator::Experiment;
use clusterfx::{ColumnSchema, EstimatorSettings, EstimatorTag, Level, Measure, PopulationMode};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimandConfig {
    pub level: Level,
    pub measure: Measure,
    pub population: PopulationMode,
}

impl Default for EstimandConfig {
    fn default() -> Self {
        Self {
            level: Level::Cluster,
            measure: Measure::Difference,
            population: PopulationMode::Source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    /// Individual-level CSV, one row per observed individual.
    pub data: Option<String>,
    pub estimator: EstimatorTag,
    pub estimand: EstimandConfig,
    /// Randomization probability of the treated arm.
    pub pi: f64,
    pub columns: ColumnSchema,
    pub settings: EstimatorSettings,
    /// Output path; not part of the embedded config.
    #[serde(skip_serializing)]
    pub out: Option<String>,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            data: None,
            estimator: EstimatorTag::EffPm,
            estimand: EstimandConfig::default(),
            pi: 0.5,
            columns: ColumnSchema::default(),
            settings: EstimatorSettings::default(),
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub experiment: Experiment,
    pub scenario: u8,
    /// Clusters per replicate; the scenario default when absent.
    pub m: Option<usize>,
    pub replicates: usize,
    /// Master seed of the data streams.
    pub seed: u64,
    pub estimators: Vec<EstimatorTag>,
    pub levels: Vec<Level>,
    pub settings: EstimatorSettings,
    #[serde(skip_serializing)]
    pub out: Option<String>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Continuous,
            scenario: 1,
            m: None,
            replicates: 1000,
            seed: 1,
            estimators: EstimatorTag::ALL.to_vec(),
            levels: vec![Level::Cluster, Level::Individual],
            settings: EstimatorSettings::default(),
            out: None,
        }
    }
}

/// Reads a config file; see the module docs for the accepted formats.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("cannot read config `{}`: {e}", path.display())))?;
    let bad = |msg: String| CliError::validation(format!("config `{}`: {msg}", path.display()));
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if let Some(embedded) = value.get_mut("config") {
            value = embedded.take();
        }
        serde_json::from_value(value).map_err(|e| bad(e.to_string()))
    } else {
        toml::from_str(&text).map_err(|e| bad(e.to_string()))
    }
}

/// Parses a kebab-case enum value such as `odds-ratio` through its serde
/// representation, so flags and config files accept the same spellings.
pub fn parse_enum<T: DeserializeOwned>(flag: &str, value: &str) -> Result<T, CliError> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| CliError::validation(format!("--{flag}: unrecognized value `{value}`")))
}

/// Splits a comma-separated flag value, dropping empty entries.
pub fn split_list(value: &str) -> Vec<String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}
