use std::fmt;
use std::io;
use std::path::Path;

use octdiff::{Error, ErrorKind};

pub type CliResult<T> = Result<T, CliError>;

/// A failure with the exit status it maps to.
#[derive(Debug)]
pub struct CliError {
    kind: ErrorKind,
    message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Data,
            message: message.into(),
        }
    }

    /// `e` prefixed with the file it concerns.
    pub fn at(path: &Path, e: Error) -> Self {
        let mut err = Self::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    }

    /// 2 for configuration problems, 3 for bad or missing data, 4 for
    /// numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        // Refusing to overwrite is a usage problem, not bad data.
        let kind = match &e {
            Error::Io(io) if io.kind() == io::ErrorKind::AlreadyExists => ErrorKind::Config,
            _ => e.kind(),
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Error::Io(e).into()
    }
}
