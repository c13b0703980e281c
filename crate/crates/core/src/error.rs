use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("degenerate image {width}x{height}: {reason}")]
    DegenerateImage {
        width: usize,
        height: usize,
        reason: &'static str,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no positive examples for {0}")]
    NoPositives(String),
}
