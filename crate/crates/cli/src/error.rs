use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}", config_message(.line, .key, .message))]
    Config {
        line: Option<usize>,
        key: String,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("missing sweep cells:\n{}", .0.join("\n"))]
    MissingCells(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] fedre_core::Error),
    #[error("{0}")]
    Format(String),
}

fn config_message(line: &Option<usize>, key: &str, message: &str) -> String {
    let at = match line {
        Some(n) => format!("line {n}"),
        None => "command line".to_string(),
    };
    if key.is_empty() {
        format!("config error at {at}: {message}")
    } else {
        format!("config error at {at}: key `{key}`: {message}")
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            _ => EXIT_VALIDATION,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Format(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Format(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
