//! Local simulation harness: one relay and N clients in one process.

pub mod compare;
pub mod partition;
pub mod sim;
pub mod stats;
pub mod synthetic;
pub mod transcript;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TestbedError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ml(#[from] fedmesh_ml::MlError),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("simulation failed: {0}")]
    Failed(String),
}

impl TestbedError {
    pub fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        TestbedError::Io { path: path.into(), source }
    }

    /// Whether the error stems from bad input rather than a failed run.
    pub fn is_config_error(&self) -> bool {
        matches!(self, TestbedError::Config(_) | TestbedError::Ml(_))
    }
}

pub type TestbedResult<T> = Result<T, TestbedError>;
