use std::path::Path;

use thiserror::Error;

use crate::trace::TrainingTrace;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numerical failure: {message} (condition estimate {condition:e})")]
    Numerical { message: String, condition: f64 },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("inconsistent state: {0}")]
    State(String),

    #[error("training failed: {message}")]
    Training { message: String, trace: Box<TrainingTrace> },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("corrupt model file: {0}")]
    Corruption(String),

    #[error(
        "model file version {found} cannot be read by this build (expects version {expected}); re-export the model"
    )]
    Migration { found: u16, expected: u16 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 validation, 2 numerical/training, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Parameter(_) | Error::Parse { .. } | Error::Schema(_) | Error::Evaluation(_) => 1,
            Error::Numerical { .. } | Error::Degenerate(_) | Error::State(_) | Error::Training { .. } => 2,
            Error::Io(_) | Error::Corruption(_) | Error::Migration { .. } => 3,
        }
    }

    /// An i/o error that names the file it concerns.
    pub(crate) fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}
