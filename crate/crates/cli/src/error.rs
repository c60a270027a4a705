use std::fmt;
use std::process::ExitCode;

/// Failure of a command, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or settings; exit 1.
    Usage(String),
    /// Unreadable or inconsistent input data; exit 2.
    Data(String),
    /// Non-finite loss or failed gradient checks; exit 3.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<dfca_core::Error> for CliError {
    fn from(e: dfca_core::Error) -> Self {
        let msg = e.to_string();
        if matches!(e, dfca_core::Error::Numeric(_)) {
            CliError::Numeric(msg)
        } else if e.is_data_error() {
            CliError::Data(msg)
        } else {
            CliError::Usage(msg)
        }
    }
}
