use std::process::ExitCode;

use thiserror::Error;

/// How a command that ran to completion ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Clean,
    /// Completed, but found discrepancies or partial failures worth a non-zero exit.
    Findings,
}

impl From<Status> for ExitCode {
    fn from(s: Status) -> Self {
        match s {
            Status::Clean => ExitCode::SUCCESS,
            Status::Findings => ExitCode::from(1),
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    /// The input file or configuration could not be read or is invalid.
    #[error("invalid input: {0}")]
    Input(String),
    /// The environment refused: port in use, unusable data directory, network, output file.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Input(_) => ExitCode::from(3),
            CliError::Runtime(_) => ExitCode::from(4),
        }
    }
}

pub fn print_json<T: serde::Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("encoding output: {e}")))?;
    println!("{text}");
    Ok(())
}
