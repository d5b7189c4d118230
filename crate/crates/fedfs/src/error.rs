use thiserror::Error;

/// Errors surfaced by the simulator.
///
/// Numerical trouble (NaN/Inf) is always reported, never silently propagated:
/// operations that promise finite output validate it, and client training
/// aborts with [`Error::Diverged`] so the server can exclude the client from
/// aggregation for the round.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("batch too small: need at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged (non-finite loss) at local step {step}")]
    Diverged { step: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dataset validation failed: {0}")]
    Validation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("client registry is empty")]
    EmptyRegistry,

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
