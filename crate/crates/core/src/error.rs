use thiserror::Error;

/// Errors produced by the simulator, trainer and file loaders.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch on {axis}: expected {expected}, found {found}")]
    Shape {
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("value {value} out of range for {what} (allowed {min}..={max})")]
    Range {
        what: &'static str,
        value: i64,
        min: i64,
        max: i64,
    },

    #[error("accumulator overflow: {0} does not fit in 32 bits")]
    Overflow(i64),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-binary input: element {index} has value {value}")]
    NonBinary { index: usize, value: i64 },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{kind} file: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
