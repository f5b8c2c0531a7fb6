//! Command implementations behind the `dualmix` binary.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use dualmix::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{}: {1}", .0.display())]
    Schema(PathBuf, String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// Process exit status for this error's category.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Schema(..) => 6,
            CliError::Core(e) => core_code(e),
        }
    }
}

fn core_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 3,
        Error::Io(_) => 4,
        Error::Format(_) => 5,
        Error::Stage { source, .. } => core_code(source),
        _ => 7,
    }
}
