use std::fmt;
use std::io;

use segt::Error;

/// Top-level failure of a subcommand, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Usage(String),
    AccessionMismatch {
        no_prediction: Vec<String>,
        no_truth: Vec<String>,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::AccessionMismatch { .. } => 5,
            CliError::Core(e) => match e {
                Error::MissingInput(_) => 3,
                Error::ConfigMismatch(_) => 4,
                Error::MissingVariant { .. } => 6,
                Error::Parse { .. }
                | Error::Alphabet { .. }
                | Error::Duplicate(_)
                | Error::Format(_)
                | Error::UnsupportedVersion(_)
                | Error::InvalidConfig(_)
                | Error::InvalidKernel(_)
                | Error::SequenceTooShort { .. }
                | Error::Io(_)
                | Error::Json(_) => 2,
                Error::Shape(_)
                | Error::NonFinite(_)
                | Error::CheckFailed(_)
                | Error::Undefined(_)
                | Error::StepRejected(_) => 1,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Usage(m) => f.write_str(m),
            CliError::AccessionMismatch {
                no_prediction,
                no_truth,
            } => {
                write!(f, "accession mismatch")?;
                if !no_prediction.is_empty() {
                    write!(f, "; no prediction for: {}", no_prediction.join(", "))?;
                }
                if !no_truth.is_empty() {
                    write!(f, "; no truth for: {}", no_truth.join(", "))?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

pub type CliResult<T> = Result<T, CliError>;
