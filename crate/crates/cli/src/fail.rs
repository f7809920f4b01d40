//! Exit-code mapping: 2 for usage and data errors, 3 for numerical failures.

use std::fmt;

use csu_core::CsuError;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<CsuError> for CliError {
    fn from(e: CsuError) -> Self {
        let code = if e.is_numeric() { EXIT_NUMERIC } else { EXIT_USAGE };
        CliError { code, message: e.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(message: impl Into<String>) -> CliError {
    CliError { code: EXIT_USAGE, message: message.into() }
}
