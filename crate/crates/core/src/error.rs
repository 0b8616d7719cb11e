use std::fmt;

/// Crate-wide error type. Variants map onto the CLI exit-code classes:
/// `Config`/`Shape` are usage errors, `Data`/`Io` are input errors and
/// `Numeric` is a numerical failure.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    Shape(String),
    /// Invalid configuration, search-space definition or candidate.
    Config(String),
    /// Malformed or missing input data (dataset files, traces, logs).
    Data(String),
    /// Non-finite values or other numerical breakdown.
    Numeric(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
