//! Command implementations behind the `rgbt` binary. Every command writes
//! its report to a caller-supplied writer so tests can capture it.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod imaging;
pub mod selftest;
pub mod toydata;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] rgbt_prompt::Error),

    #[error("selftest: {failed} of {total} checks failed")]
    SelfTest { failed: usize, total: usize },

    #[error("writing output: {0}")]
    Output(#[from] std::io::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 1 for usage and configuration problems, 2 for bad data, 3 for
    /// numeric failures.
    pub fn exit_code(&self) -> i32 {
        use rgbt_prompt::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_)) => 1,
            CliError::Core(E::NonFinite(_)) | CliError::SelfTest { .. } => 3,
            CliError::Core(_) | CliError::Output(_) => 2,
        }
    }
}
