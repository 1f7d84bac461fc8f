use std::fmt::Display;
use std::path::Path;

use ctp4d_core::Error;

/// A command failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    /// Bad arguments, configuration or missing inputs.
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    /// The run went ahead but some or all of the work failed.
    pub fn partial(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    pub fn context(self, what: impl Display) -> Self {
        Failure {
            code: self.code,
            message: format!("{what}: {}", self.message),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) | Error::Shape(_) | Error::EmptyDataset(_) => {
                Failure::usage(e.to_string())
            }
            _ => Failure::partial(e.to_string()),
        }
    }
}

pub fn require_dir(path: &Path, what: &str) -> Result<(), Failure> {
    if !path.is_dir() {
        return Err(Failure::usage(format!(
            "{what} {} does not exist or is not a directory",
            path.display()
        )));
    }
    Ok(())
}

pub fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if !path.is_file() {
        return Err(Failure::usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

pub fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure::usage(format!("cannot create {}: {e}", path.display())))
}
