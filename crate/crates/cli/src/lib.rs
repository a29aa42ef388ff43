//! Library half of the `asldn` binary: run configuration, the subject
//! manifest, and the subcommand implementations. Kept as a library so the
//! pieces are testable without spawning processes.

use std::fmt;

pub mod commands;
pub mod config;
pub mod manifest;

/// What went wrong, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration values; exit code 1.
    Usage(String),
    /// The pipeline itself failed (missing inputs, diverged training,
    /// unreadable files); exit code 2.
    Runtime(String),
    /// A gradient check exceeded its tolerance; exit code 3.
    Gradcheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Gradcheck(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Runtime(msg) | CliError::Gradcheck(msg) => f.write_str(msg),
        }
    }
}

impl std::error::Error for CliError {}
