//! Shared error type for the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("negative entry {value} at row {row}, column {col}")]
    NegativeEntry { row: usize, col: usize, value: f64 },

    #[error("column {col} ({name}) has no positive mass")]
    ZeroColumn { col: usize, name: String },

    #[error("duplicate signature name {name:?}")]
    DuplicateName { name: String },

    #[error("{what} = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        what: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid {what}: {msg}")]
    Invalid { what: String, msg: String },

    #[error("prediction row {row}: expected index {expected}, got {got}")]
    IndexMismatch {
        row: usize,
        expected: usize,
        got: usize,
    },

    #[error("prediction file is missing radionuclide column {name:?}")]
    MissingColumn { name: String },

    #[error("need at least {needed} spectra, got {got}")]
    TooFewSpectra { needed: usize, got: usize },

    #[error("gain-shifted column {col} retained no in-range mass at alpha = {alpha}")]
    EmptyShift { col: usize, alpha: f64 },
}

impl Error {
    /// Attach a path to a raw i/o error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(what: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Invalid {
            what: what.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
