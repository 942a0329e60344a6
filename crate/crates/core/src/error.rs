use thiserror::Error;

use crate::supervision::SupervisionError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("ownerships not on the probability simplex: max |sum - 1| = {max_deviation:e}, min value = {min_value:e}")]
    Infeasible { max_deviation: f64, min_value: f64 },

    #[error("invalid supervision: {0}")]
    Supervision(#[from] SupervisionError),

    #[error("{stage} solver produced a non-finite iterate (residual {residual:e})")]
    Diverged { stage: &'static str, residual: f64 },

    #[error("degenerate state: {0}")]
    Degenerate(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
