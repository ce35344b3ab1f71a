use std::path::PathBuf;

use tds_core::TdsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: TdsError,
    },
}

impl CliError {
    pub fn core(context: impl Into<String>) -> impl FnOnce(TdsError) -> CliError {
        let context = context.into();
        move |source| CliError::Core { context, source }
    }

    /// Process exit status: 2 configuration, 3 solver or training failure,
    /// 4 input/output or data-format problem.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Io { .. } => 4,
            CliError::Core { source, .. } => match source {
                TdsError::InvalidParameter { .. } | TdsError::ExhaustedRetries { .. } => 2,
                TdsError::NonConvergence { .. } | TdsError::SimulationFailed { .. } | TdsError::NonFiniteLoss { .. } => 3,
                TdsError::ShapeMismatch { .. }
                | TdsError::RangeMismatch { .. }
                | TdsError::InconsistentData(_)
                | TdsError::VersionMismatch { .. }
                | TdsError::Parse { .. }
                | TdsError::Io(_)
                | TdsError::Json(_) => 4,
            },
        }
    }
}
