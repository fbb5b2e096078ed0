use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SbevError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("horizon pixel ({u}, {v}): ray does not meet the ground plane")]
    Horizon { u: f64, v: f64 },

    #[error("{path}: {detail}")]
    Data { path: PathBuf, detail: String },

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error(transparent)]
    Autograd(#[from] sbev_autograd::AutogradError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SbevError>;

pub(crate) fn config_err<T>(detail: impl Into<String>) -> Result<T> {
    Err(SbevError::Config(detail.into()))
}

pub(crate) fn data_err<T>(path: impl Into<PathBuf>, detail: impl Into<String>) -> Result<T> {
    Err(SbevError::Data {
        path: path.into(),
        detail: detail.into(),
    })
}
