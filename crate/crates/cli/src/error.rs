use std::path::Path;

use rcm_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    /// 0 success, 2 configuration or input error, 3 numerical failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 4,
            CliError::GradCheck(_) => 3,
            CliError::Core(e) => match e {
                CoreError::Io(_) => 4,
                CoreError::Divergence { .. }
                | CoreError::DegeneratePoint(_)
                | CoreError::SingularHomography(_)
                | CoreError::RankDeficient(_)
                | CoreError::NoModel(_) => 3,
                _ => 2,
            },
        }
    }
}
