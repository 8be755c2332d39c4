use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in input row {row}")]
    NonFinite { row: usize },

    #[error("invalid kernel size {0}: must be odd and at least 1")]
    InvalidKernelSize(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("operands live on different coordinate maps")]
    CoordinateMapMismatch,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
