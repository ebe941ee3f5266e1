//! Command implementations behind the `ikod` binary.
//!
//! Every command is deterministic for a fixed config: outputs are written
//! with stable key order, shortest round-trip float formatting and LF line
//! endings.

pub mod args;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use ikod_core::IkodError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CAPACITY: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },

    #[error(transparent)]
    Core(#[from] IkodError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_capacity() => EXIT_CAPACITY,
            _ => EXIT_USAGE,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub use args::{Cli, Command};

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Decode(a) => commands::decode(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Flops(a) => commands::flops(&a),
        Command::Metrics(a) => commands::metrics(&a),
    }
}
