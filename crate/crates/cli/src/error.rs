use std::fmt;

use aofl::data::DataError;
use aofl::model::{CheckpointError, ModelError};
use aofl::train::TrainError;

/// A failed command, carrying the process exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config, or hyperparameters. Exit 1.
    Usage(String),
    /// Unreadable, malformed, or incompatible data and checkpoints. Exit 2.
    Data(String),
    /// Non-finite losses or a broken numerical invariant. Exit 3.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Invalid(_) | DataError::Split(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Model(_) => CliError::Usage(e.to_string()),
            TrainError::Data(_) => CliError::Data(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

pub fn io_error(what: &str, path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{what} {}: {e}", path.display()))
}
