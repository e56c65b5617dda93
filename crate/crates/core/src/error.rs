//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument for {context}: {message}")]
    InvalidArgument {
        context: &'static str,
        message: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("enumeration budget exceeded in {context}: {used} > {budget}")]
    BudgetExceeded {
        context: &'static str,
        used: usize,
        budget: usize,
    },

    #[error("solver failed in {context}: {message}")]
    SolverFailure {
        context: &'static str,
        message: String,
    },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(context: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            context,
            message: message.into(),
        }
    }

    pub(crate) fn solver(context: &'static str, message: impl Into<String>) -> Self {
        Error::SolverFailure {
            context,
            message: message.into(),
        }
    }
}
