use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient dimension: {patterns} patterns do not fit in dimension {dim}")]
    InsufficientDimension { dim: usize, patterns: usize },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("time step {t} outside 1..={steps}")]
    TimeIndex { t: usize, steps: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("subset enumeration too large: C({m}, {k}) = {count} exceeds {limit}")]
    Enumeration { m: usize, k: usize, count: u128, limit: u128 },

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("degenerate attention: zero weight in the class of query {query}")]
    ZeroWeight { query: usize },

    #[error("empty group: {0}")]
    EmptyGroup(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("panel {panel}: {source}")]
    Panel { panel: String, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParam {
        field,
        reason: reason.into(),
    }
}
