use std::path::Path;

use eiv_core::EivError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] EivError),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    MissingData(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 1 for invalid input, 2 for failures while computing, 3 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io { .. } | CliError::MissingData(_) => 3,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

fn core_exit_code(e: &EivError) -> i32 {
    match e {
        EivError::NonFiniteLoss { .. } | EivError::NonFinite { .. } => 2,
        EivError::RunFailed { source, .. } => core_exit_code(source),
        EivError::Io(_) => 3,
        _ => 1,
    }
}
