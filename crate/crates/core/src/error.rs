use thiserror::Error;

/// Errors raised by every layer of the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("point outside the admissible domain: {0}")]
    Domain(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("capability unavailable: {0}")]
    Capability(String),
    #[error("singular point: {0}")]
    Singular(String),
    #[error("derivative norm underflowed below 1e-300 at step {step}; use the log-radial mode")]
    Underflow { step: usize },
    #[error("parse error at column {column}: {message}")]
    Parse { column: usize, message: String },
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, FlowError>;

impl From<std::io::Error> for FlowError {
    fn from(e: std::io::Error) -> Self {
        FlowError::Io(e.to_string())
    }
}
