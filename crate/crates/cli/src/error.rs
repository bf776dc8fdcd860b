use std::fmt;

/// Command failure, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid or inconsistent configuration (exit 2).
    Config(String),
    /// Missing or unreadable input, unwritable output (exit 3).
    Io(String),
    /// A run hit a non-finite loss or gradient (exit 4).
    Numeric(String),
    /// Nothing to report or every grid cell failed (exit 5).
    Empty(String),
    /// Anything else (exit 1).
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Empty(_) => 5,
            CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric abort: {m}"),
            CliError::Empty(m) => write!(f, "empty result: {m}"),
            CliError::Internal(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<mimic_core::Error> for CliError {
    fn from(e: mimic_core::Error) -> Self {
        use mimic_core::Error as E;
        match e {
            E::Io(_) | E::Image(_) => CliError::Io(e.to_string()),
            E::Aborted { .. } | E::NonFinite(_) => CliError::Numeric(e.to_string()),
            E::Tensor(_) => CliError::Internal(e.to_string()),
            _ => CliError::Config(e.to_string()),
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
        CliError::Io(format!("malformed json: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
