use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
    #[error("{0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] dvk_core::Error),
    #[error(transparent)]
    Cnn(#[from] dvk_cnn::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Cnn(dvk_cnn::Error::NonFinite(_)) => 3,
            Error::Cnn(dvk_cnn::Error::InvalidConfig(_)) => 1,
            _ => 2,
        }
    }
}
