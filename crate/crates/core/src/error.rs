use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("non-finite input: {0}")]
    Numeric(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("invalid state: {0}")]
    State(String),

    /// Weight file decoding failure; `offset` is the byte offset in the file.
    #[error("weight file error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("no feasible hardware plan; binding constraints: {}", binding.join(", "))]
    Infeasible { binding: Vec<String> },

    /// An internal equivalence assertion in the benchmark harness failed.
    #[error("check `{name}` failed: {detail}")]
    Check { name: String, detail: String },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidValue(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
