use std::fmt;

use dsg_core::DsgError;

/// Error carrying the process exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Validation(String),
    Verification(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Verification(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Validation(m) | CliError::Verification(m) | CliError::Io(m) => {
                f.write_str(m)
            }
        }
    }
}

impl From<DsgError> for CliError {
    fn from(e: DsgError) -> Self {
        let msg = e.to_string();
        match e.root() {
            DsgError::Format(_) | DsgError::Io(_) | DsgError::Json(_) | DsgError::Csv(_) => CliError::Io(msg),
            _ => CliError::Validation(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
