use std::fmt;

/// Command failure, split by who has to act on it.
#[derive(Debug)]
pub enum CliError {
    /// Bad input, bad config or a missing prerequisite. Exit code 1.
    User(String),
    /// Something went wrong inside the pipeline. Exit code 2.
    Internal(String),
}

impl CliError {
    pub fn user(msg: impl Into<String>) -> Self {
        CliError::User(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        CliError::Internal(msg.into())
    }

    /// A required artifact is absent; names the command that produces it.
    pub fn missing(what: &str, path: &std::path::Path, command: &str) -> Self {
        CliError::User(format!("{what} not found at {}; run `stride {command}` first", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::User(m) => write!(f, "error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<stride_core::Error> for CliError {
    fn from(e: stride_core::Error) -> Self {
        use stride_core::Error as E;
        match e {
            E::NonFinite(_) | E::Shape(_) => CliError::Internal(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}
