use std::path::PathBuf;
use std::process::ExitCode;

use srpn_core::config::ConfigError;
use srpn_core::error::{DataError, EvalError, ModelError, TrainError};
use thiserror::Error;

/// Process exit codes. Usage errors exit with 2 through clap.
pub mod code {
    pub const FAILURE: u8 = 1;
    pub const MISSING_FILE: u8 = 3;
    pub const BAD_CONFIG: u8 = 4;
    pub const BAD_DATA: u8 = 5;
    pub const DIVERGED: u8 = 6;
    pub const GRADCHECK_FAILED: u8 = 7;
    pub const METRIC_UNAVAILABLE: u8 = 8;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    BadArgument(String),
    #[error("dataset: {0}")]
    Data(#[from] DataError),
    #[error("checkpoint: {0}")]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("gradient check failed for {0} case(s)")]
    GradCheck(usize),
    #[error("metric unavailable: {0}")]
    Eval(#[from] EvalError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn exit_code(&self) -> ExitCode {
        let c = match self {
            CliError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => code::MISSING_FILE,
            CliError::Io { .. } => code::FAILURE,
            CliError::Config(ConfigError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => code::MISSING_FILE,
            CliError::Config(_) | CliError::BadArgument(_) => code::BAD_CONFIG,
            CliError::Data(DataError::Io(e)) | CliError::Model(ModelError::Io(e))
                if e.kind() == std::io::ErrorKind::NotFound =>
            {
                code::MISSING_FILE
            }
            CliError::Data(_) | CliError::Model(_) => code::BAD_DATA,
            CliError::Train(TrainError::Diverged { .. }) => code::DIVERGED,
            CliError::Train(TrainError::Config(_)) => code::BAD_CONFIG,
            CliError::Train(TrainError::EmptyDataset) => code::BAD_DATA,
            CliError::Train(TrainError::Model(ModelError::Divisibility { .. })) => code::BAD_DATA,
            CliError::Train(_) => code::FAILURE,
            CliError::GradCheck(_) => code::GRADCHECK_FAILED,
            CliError::Eval(_) => code::METRIC_UNAVAILABLE,
        };
        ExitCode::from(c)
    }
}
