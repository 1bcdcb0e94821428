use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("failed to load {path}: {reason}")]
    Frame { path: PathBuf, reason: String },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("no eligible source frame for mask {mask_id}")]
    Selection { mask_id: usize },

    #[error("no searchable patch in the exemplar domain")]
    Search,

    #[error("poisson solver did not converge after {iterations} iterations (residual {residual:e})")]
    Solver { iterations: usize, residual: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing stage artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("artifact {path} is not usable: {reason}")]
    Artifact { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
