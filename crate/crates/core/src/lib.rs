//! Treatment-effect estimators for cluster-randomized experiments.
//!
//! Two estimands are supported: the cluster-average effect, where every
//! cluster counts equally, and the individual-average effect, where every
//! member of the source population counts equally. Estimators:
//!
//! * [`EstimatorTag::Unadjusted`]: difference of arm means of cluster means.
//! * [`EstimatorTag::GeeG`]: g-computation from a GEE working model.
//! * [`EstimatorTag::LmmG`]: g-computation from a random-intercept LMM.
//! * [`EstimatorTag::EffPm`]: efficient estimator with parametric nuisances.
//! * [`EstimatorTag::EffMl`]: efficient estimator with cross-fitted learners.
//!
//! [`simulator`] reproduces a four-scenario Monte-Carlo study.
//!
//! ```
//! use clusterfx::simulator::{generate_dataset, Experiment, ScenarioConfig};
//! use clusterfx::{run_estimator, EstimandSpec, EstimatorSettings, EstimatorTag, Level, Measure, PopulationMode};
//!
//! # fn main() -> clusterfx::Result<()> {
//! let cfg = ScenarioConfig::new(Experiment::Continuous, 3, 1, 1)?;
//! let ds = generate_dataset(&cfg, 0)?;
//! let spec = EstimandSpec::new(Level::Individual, Measure::Difference, PopulationMode::Source)?;
//! let res = run_estimator(EstimatorTag::EffPm, &ds, &spec, &EstimatorSettings::default())?;
//! assert!(res.ci_low < res.delta && res.delta < res.ci_high);
//! # Ok(())
//! # }
//! ```

pub mod data;
pub mod design;
pub mod efficient;
pub mod error;
pub mod estimators;
pub mod gee;
pub mod learners;
pub mod lmm;
pub mod nuisance;
pub mod numerics;
pub mod simulator;

pub use data::{
    validate_dataset, ClusterRecord, ColumnSchema, EstimandSpec, EstimateResult, EstimatorTag,
    Level, Measure, PopulationMode, RawTable, TrialDataset,
};
pub use error::{Error, Result};
pub use estimators::{run_estimator, EstimatorSettings};
