use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is not positive definite (largest jitter tried: {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("non-finite objective value")]
    NonFiniteObjective,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("non-finite value at line {line}, column {column}")]
    NonFiniteValue { line: usize, column: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("quadrature order {0} out of range (1..=30)")]
    QuadratureOrder(usize),

    #[error("requested {requested} clusters from {available} points")]
    TooFewPoints { requested: usize, available: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("all {0} restarts failed")]
    AllRestartsFailed(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
