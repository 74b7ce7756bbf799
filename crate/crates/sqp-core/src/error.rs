//! Error type shared by all modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SqpError>;

#[derive(Debug, Error)]
pub enum SqpError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("element {index} is {value}, expected exactly 0.0 or 1.0")]
    NonBinaryElement { index: usize, value: f32 },

    #[error("window out of bounds: {0}")]
    WindowOutOfBounds(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("NaN gradient in parameter {0}")]
    NanGradient(String),

    #[error("training diverged (validation loss not finite) at epoch {epoch}")]
    Diverged {
        epoch: usize,
        history: Vec<crate::train::EpochStats>,
    },

    #[error("zero variance: Pearson correlation is undefined")]
    ZeroVariance,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
