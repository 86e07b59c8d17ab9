use driftmoe::Error;

pub const CONFIG: u8 = 2;
pub const DATA: u8 = 3;
pub const CHECKPOINT: u8 = 4;

/// An error message with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: DATA,
            message: message.into(),
        }
    }

    pub fn checkpoint(message: impl Into<String>) -> Self {
        Self {
            code: CHECKPOINT,
            message: message.into(),
        }
    }

    /// Classifies a library error; I/O errors take `io_code`, since a missing
    /// file means different things for data and checkpoints.
    pub fn from_core(e: Error, io_code: u8) -> Self {
        let code = match e {
            Error::Config(_) | Error::Parameter(_) => CONFIG,
            Error::Checkpoint(_) => CHECKPOINT,
            Error::Io(_) => io_code,
            _ => DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }

    /// Failure writing an output artifact.
    pub fn output(e: impl std::fmt::Display) -> Self {
        Self {
            code: 1,
            message: format!("cannot write output: {e}"),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;
