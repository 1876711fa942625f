use thiserror::Error;

/// Errors surfaced by the simulator and its calculators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("diverged at round {round}, client {client}, local step {step}: non-finite iterate")]
    Divergence { round: usize, client: usize, step: usize },

    #[error("infeasible: {condition} (value {value})")]
    Infeasible { condition: String, value: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("communication accounting overflow: more than 2^63 bits")]
    AccountingOverflow,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
