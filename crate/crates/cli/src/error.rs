use std::path::PathBuf;

use depthgrow_core::Error as CoreError;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("config error: {0}")]
    Config(String),

    #[error("{} exists; pass --overwrite to replace it", .0.display())]
    Clobber(PathBuf),

    #[error("cannot access {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("gradient check failed: max relative error {max:e} >= {tolerance:e}")]
    Gradcheck { max: f64, tolerance: f64 },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// Process exit status: 2 config, 3 data, 4 numeric, 5 freeze violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Clobber(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Gradcheck { .. } => 4,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Contract(_) | CoreError::Shape { .. } => 2,
                CoreError::Data(_)
                | CoreError::Checkpoint(_)
                | CoreError::Length { .. }
                | CoreError::EmptyBatch
                | CoreError::Io(_) => 3,
                CoreError::Numeric(_) => 4,
                CoreError::FreezeViolation(_) => 5,
            },
        }
    }
}
