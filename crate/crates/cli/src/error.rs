use capsib_core::autodiff::AutodiffError;
use capsib_core::capsule::OpsError;
use capsib_core::data::DataError;
use capsib_core::model::ModelError;
use capsib_core::training::{CheckpointError, TrainError};
use thiserror::Error;

/// Every failure maps to one exit code: 1 configuration, 2 data or I/O,
/// 3 numeric abort.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::ConfigMismatch(_) => CliError::Config(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Chain { .. } | ModelError::Params(_) => CliError::Config(e.to_string()),
            ModelError::Ops(OpsError::Autodiff(AutodiffError::NonFinite { .. })) => CliError::Numeric(e.to_string()),
            ModelError::Ops(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Model(e) => e.into(),
            TrainError::Data(e) => e.into(),
            TrainError::Checkpoint(e) => e.into(),
        }
    }
}
