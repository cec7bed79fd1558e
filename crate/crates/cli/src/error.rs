use std::fmt;
use std::process::ExitCode;

use atnf_core::Error;

/// Failure classified by exit code: 2 for usage, configuration and input
/// problems, 3 for failures while running.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(3),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_)
            | Error::Field { .. }
            | Error::UnknownWord { .. }
            | Error::PromptTooLong { .. }
            | Error::Io { .. }
            | Error::Format { .. }
            | Error::Version { .. } => CliError::Usage(msg),
            Error::Dimension { .. }
            | Error::Numeric { .. }
            | Error::Contract(_)
            | Error::HookShape { .. } => CliError::Runtime(msg),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
