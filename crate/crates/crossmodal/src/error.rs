//! Crate-wide error type and the process exit codes it maps to.

use thiserror::Error;

/// Unified error type for the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed an argument that violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration file or flag combination is unusable.
    #[error("configuration error: {0}")]
    Config(String),

    /// A dataset, checkpoint, or other on-disk artifact is missing or malformed.
    #[error("data error: {0}")]
    Data(String),

    /// A computation produced NaN/Inf or otherwise left the numeric contract.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Training hit a non-finite loss. Carries the offending task as JSON so
    /// the exact step can be replayed in isolation.
    #[error("training diverged at step {step}; replay task: {task_json}")]
    TrainingDiverged { step: u64, task_json: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed config file: {0}")]
    TomlParse(#[from] toml::de::Error),
}

impl Error {
    /// Process exit code for this error: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::TomlParse(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::Numerical(_) | Error::TrainingDiverged { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
