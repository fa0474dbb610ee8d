use std::path::PathBuf;

use seqint_core::ErrorKind;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] seqint_core::Error),
    #[error("column `{0}` not found in the input header")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: `{value}` is not a number")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column `{column}`: missing value (use --drop-incomplete to skip such rows)")]
    MissingValue { row: usize, column: String },
    #[error("row {row}: treatment must be the literal 0 or 1, found `{value}`")]
    TreatmentLiteral { row: usize, value: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("malformed CSV: {0}")]
    Csv(String),
    #[error("serialization failed: {0}")]
    Serialize(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// 2 for input or configuration problems, 3 for numerical failures,
    /// 4 for violated internal invariants.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e.kind() {
                ErrorKind::Input => 2,
                ErrorKind::Numerical => 3,
                ErrorKind::Invariant => 4,
            },
            CliError::Serialize(_) => 4,
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
