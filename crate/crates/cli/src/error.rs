use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration syntax error: {0}")]
    Syntax(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Engine(#[from] ggsd::Error),
}

impl CliError {
    /// Process exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Syntax(_) | CliError::Invalid(_) | CliError::Usage(_) => 2,
            CliError::Io { .. } | CliError::Engine(_) => 1,
        }
    }
}
