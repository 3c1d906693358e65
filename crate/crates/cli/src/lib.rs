//! Command-line front end: configuration loading, subcommands and output.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{dispatch, Command, Outcome, RunOptions};
pub use config::{parse_config, parse_str, RunConfig};
pub use error::CliError;

/// Directory holding the bundled example configurations.
pub fn bundled_config_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}
