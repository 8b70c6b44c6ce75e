//! CLI errors with the fixed exit-code contract:
//! 2 config/schema, 3 data, 4 solver non-convergence, 5 taxonomy failure.

use std::fmt;

#[derive(Debug)]
pub struct CliError {
    pub message: String,
    pub exit_code: i32,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { message: message.into(), exit_code: 2 }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { message: message.into(), exit_code: 3 }
    }

    pub fn solver(message: impl Into<String>) -> Self {
        Self { message: message.into(), exit_code: 4 }
    }

    pub fn taxonomy(message: impl Into<String>) -> Self {
        Self { message: message.into(), exit_code: 5 }
    }

    pub fn from_core_config(e: kernelblend_core::Error) -> Self {
        Self::config(e.to_string())
    }

    pub fn from_core_data(e: kernelblend_core::Error) -> Self {
        Self::data(e.to_string())
    }
}
