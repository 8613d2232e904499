//! Error type shared across the library and the CLI.
//!
//! Each variant maps to a process exit code so the CLI can classify
//! failures without string matching: config 2, data 3, numerical 4,
//! shape/contract 5.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Invalid configuration value, flag, or file.
    Config(String),
    /// Missing or malformed input data, checkpoints, or output files.
    Data(String),
    /// NaN/Inf encountered where finite values are required.
    Numerical(String),
    /// Dimension mismatch or violated call contract.
    Shape(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
            Error::Shape(_) => 5,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Numerical(msg) => write!(f, "numerical error: {msg}"),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
