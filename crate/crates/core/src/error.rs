use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        dim: String,
        expected: String,
        got: String,
    },

    #[error("{op}: {what} ({value}) is not divisible by {divisor}")]
    Divisibility {
        op: &'static str,
        what: String,
        value: usize,
        divisor: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("non-finite value in `{name}`")]
    NonFinite { name: String },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(
        op: &'static str,
        dim: impl Into<String>,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Shape {
            op,
            dim: dim.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn divisibility(
        op: &'static str,
        what: impl Into<String>,
        value: usize,
        divisor: usize,
    ) -> Self {
        Error::Divisibility {
            op,
            what: what.into(),
            value,
            divisor,
        }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
