use std::fmt;

use xattn_core::Error;

/// A failure carrying the process exit code.
///
/// 2: bad configuration or input files, 3: inversion failure,
/// 4: backbone failure, 1: anything else.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(2, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Format(_) | Error::Io(_) | Error::Image(_) => 2,
        Error::InversionDegenerate { .. } => 3,
        Error::Backbone(_) | Error::Plan(_) => 4,
        Error::InvalidShape(_) | Error::DegenerateMask(_) => 1,
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        Self::new(exit_code(&err), err.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err).into()
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;
