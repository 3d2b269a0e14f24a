use std::fmt;
use std::path::Path;

use genshield_core::dataset::DatasetError;
use genshield_core::evalharness::EvalError;
use genshield_core::inference::InferenceError;
use genshield_core::model::ModelError;
use genshield_core::trainer::{CheckpointError, TrainError};

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub exit: u8,
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(exit: u8, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            exit,
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_VALIDATION, "config", message)
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_VALIDATION, "usage", message)
    }

    pub fn missing(message: impl Into<String>) -> Self {
        Self::new(EXIT_VALIDATION, "missing_prerequisite", message)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(EXIT_RUNTIME, "io", format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // one line, always
        let msg = self.message.replace('\n', " ");
        write!(f, "ERROR: {}: {}", self.code, msg)
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        Self::new(EXIT_RUNTIME, "dataset", e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::new(EXIT_RUNTIME, "checkpoint", e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => Self::config(m),
            other => Self::new(EXIT_RUNTIME, "train", other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::new(EXIT_RUNTIME, "eval", e.to_string())
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        Self::new(EXIT_RUNTIME, "inference", e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::new(EXIT_RUNTIME, "model", e.to_string())
    }
}
