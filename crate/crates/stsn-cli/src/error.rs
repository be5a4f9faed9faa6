//! Process-level error taxonomy mapped to exit codes.

use std::fmt;

/// Exit codes: 0 ok, 2 config error, 3 data error, 4 runtime error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    Config = 2,
    Data = 3,
    Runtime = 4,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unknown keys, invalid values.
    Config(String),
    /// Unparseable or inconsistent input data; carries file/line context.
    Data(String),
    /// IO failures and internal errors.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::Config,
            CliError::Data(_) => ExitCode::Data,
            CliError::Runtime(_) => ExitCode::Runtime,
        }
    }

    /// One-line machine-parsable form: `error: <kind>: <detail>`.
    pub fn one_line(&self) -> String {
        match self {
            CliError::Config(m) => format!("error: config: {m}"),
            CliError::Data(m) => format!("error: data: {m}"),
            CliError::Runtime(m) => format!("error: runtime: {m}"),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.one_line())
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn data_err(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}

pub fn runtime_err(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}
