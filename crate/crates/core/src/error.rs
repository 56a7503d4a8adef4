use thiserror::Error;

/// Errors raised across the scheduling stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    Parameter { field: &'static str, reason: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("schedule is not an independent set: vertices {a} and {b} conflict")]
    Infeasible { a: usize, b: usize },

    #[error("graph has {n} vertices, exact solver is bounded to {limit}; use the greedy solver")]
    TooLarge { n: usize, limit: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param_err(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Parameter { field, reason: reason.into() }
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
