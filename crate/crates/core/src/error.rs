use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("row {row}: column `{column}`: {message}")]
    InvalidValue {
        row: usize,
        column: String,
        message: String,
    },

    #[error("required column `{0}` is missing from the input")]
    MissingColumn(String),

    #[error("row {row}: column `{column}` is empty")]
    MissingValue { row: usize, column: String },

    #[error("cluster `{cluster}`: `{column}` is not constant within the cluster (row {row})")]
    NonConstantWithinCluster {
        cluster: String,
        column: String,
        row: usize,
    },

    #[error("treatment arm {arm} has {count} clusters; at least {required} are needed")]
    EmptyArm {
        arm: u8,
        count: usize,
        required: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is singular (pivot {pivot:.3e} at column {column})")]
    SingularMatrix { column: usize, pivot: f64 },

    #[error("design matrix is rank deficient: {0}")]
    RankDeficientDesign(String),

    #[error("{stage} did not converge after {iterations} iterations")]
    NonConvergence { stage: String, iterations: usize },

    #[error("non-finite value while evaluating {0}")]
    NonFiniteEvaluation(String),

    #[error("no cluster has at least two observed individuals; the correlation cannot be estimated")]
    NoPairs,

    #[error("the individual-average estimand needs source population sizes")]
    LevelUnavailable,

    #[error("arm {arm} has {count} clusters; the working model needs at least {required}")]
    ArmTooSmall {
        arm: u8,
        count: usize,
        required: usize,
    },

    #[error("a training split has no clusters in arm {0}")]
    EmptyTrainingArm(u8),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("estimator `{estimator}` failed on {failed} of {total} replicates")]
    TooManyFailures {
        estimator: String,
        failed: usize,
        total: usize,
    },
}

impl Error {
    /// True for numerical breakdown of a fit, as opposed to bad input.
    /// A rank-deficient design counts as bad input.
    pub fn is_convergence_failure(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::SingularMatrix { .. } | Error::NonFiniteEvaluation(_)
        )
    }
}
