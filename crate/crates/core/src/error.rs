use thiserror::Error;

use crate::tape::TapeError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tape(#[from] TapeError),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },

    #[error("control {index} violates the admissible domain: u = {value}, bound = {bound}")]
    Domain { index: usize, value: f64, bound: f64 },

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("fixed-point iterate became non-finite at t = {t}, iteration {iteration}, z = {z:?}")]
    FixedPointNonFinite { t: f64, iteration: usize, z: Vec<f64> },

    #[error("state became non-finite at step {step}: |z|_inf = {norm}")]
    NonFiniteState { step: usize, norm: f64 },

    #[error("trajectory was recorded without a tape")]
    Untracked,

    #[error("fixed-point Jacobian is not invertible: sigma_max(dT/du) = {spectral_norm}")]
    SingularJacobian { spectral_norm: f64 },

    #[error("tape node budget exceeded: {nodes} > {budget}")]
    NodeBudgetExceeded { nodes: usize, budget: usize },

    #[error("control dimension {m} exceeds the dense-solve limit {limit}")]
    ControlDimTooLarge { m: usize, limit: usize },

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("batch is empty")]
    EmptyBatch,

    #[error("need at least {needed} samples, got {got}")]
    BatchTooSmall { needed: usize, got: usize },

    #[error("search direction is not finite")]
    NonFiniteDirection,

    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn in_sample(self, index: usize) -> Self {
        Error::Sample { index, source: Box::new(self) }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::Iteration { iteration, source: Box::new(self) }
    }
}
