//! Command-line front end: scenario campaigns, estimation on user CSVs, and
//! truth tables for the simulation designs.

pub mod commands;
pub mod config;

use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const INSTABILITY: i32 = 3;
    pub const DATA: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("data: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Runtime(_) => exit::INSTABILITY,
            CliError::Data(_) => exit::DATA,
        }
    }
}

impl From<qiee::Error> for CliError {
    fn from(e: qiee::Error) -> Self {
        use qiee::Error as E;
        let root = match &e {
            E::Fit { source, .. } => source.as_ref(),
            other => other,
        };
        let msg = e.to_string();
        match root {
            E::Argument(_) | E::BootstrapRejected(_) => CliError::Usage(msg),
            E::Schema(_)
            | E::Parse { .. }
            | E::Integrity(_)
            | E::Io(_)
            | E::SampleSize { .. }
            | E::Estimability(_) => CliError::Data(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("io: {e}"))
    }
}
