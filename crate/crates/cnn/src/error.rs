use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("{layer}: {message}")]
    Shape { layer: String, message: String },
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("feature extraction requires eval mode")]
    NotEvalMode,
    #[error(transparent)]
    Core(#[from] dvk_core::Error),
}
