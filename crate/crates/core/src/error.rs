use thiserror::Error;

use crate::trace::TraceError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,

    #[error("dimension mismatch in {operand}: expected {expected}, found {found}")]
    DimMismatch {
        operand: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at ({row},{col})")]
    NonFinite { row: usize, col: usize },

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("non-monotonic position {pos} (last appended {last})")]
    NonMonotonicPosition { pos: usize, last: usize },

    #[error("cache is empty")]
    EmptyCache,

    #[error("empty kept set")]
    EmptyKept,

    #[error("empty input")]
    EmptyInput,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Trace(#[from] TraceError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad input data rather than bad usage.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Trace(_) | Error::NonFinite { .. } | Error::Io(_) | Error::DimMismatch { .. }
        )
    }
}
