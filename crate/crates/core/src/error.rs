use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("invalid bounds: {0}")]
    InvalidBounds(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("Cholesky factorization failed after jitter escalation to {max_jitter:e}")]
    FactorizationFailed { max_jitter: f64 },

    #[error("insufficient data: need at least {needed} observations, have {found}")]
    InsufficientData { needed: usize, found: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("objective evaluation failed: {0}")]
    Objective(String),

    /// Evaluator or generator failure. `completed` counts the validation
    /// inputs that were answered before the failure.
    #[error("evaluator failure after {completed} completed calls: {message}")]
    Evaluator {
        message: String,
        retriable: bool,
        completed: usize,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("Newton iteration diverged: {0}")]
    Divergence(String),

    #[error("preference oracle failed: {0}")]
    Oracle(String),
}
