use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossBreakdown;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (CLI exit code 2).
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at step {step}: {breakdown:?}")]
    NonFinite { step: u64, breakdown: LossBreakdown },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] kshot_tensor::TensorError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("toml: {0}")]
    Toml(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::File { path: path.into(), source }
    }

    /// Usage and configuration problems, as opposed to runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(self, Self::Config(_) | Self::Toml(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
