use std::path::PathBuf;

use fedmesh_core::app::AppError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MlError {
    #[error("{path}: row {row}, column {column}: {message}")]
    Data { path: PathBuf, row: usize, column: String, message: String },
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("singular system: {0}")]
    Singular(String),
}

impl MlError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        MlError::Invalid(msg.into())
    }

    pub fn invalid_from(e: impl std::fmt::Display) -> Self {
        MlError::Invalid(e.to_string())
    }

    pub fn file(path: impl Into<PathBuf>, msg: impl std::fmt::Display) -> Self {
        MlError::File { path: path.into(), message: msg.to_string() }
    }
}

impl From<MlError> for AppError {
    fn from(e: MlError) -> Self {
        match e {
            MlError::Data { .. } | MlError::File { .. } | MlError::Invalid(_) => AppError::Setup(e.to_string()),
            MlError::Singular(_) => AppError::Failure(e.to_string()),
        }
    }
}

pub type MlResult<T> = Result<T, MlError>;
