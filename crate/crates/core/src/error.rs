use std::fmt;
use std::io;

/// Every fallible operation in this crate returns one of these.
///
/// The variants are grouped by who is at fault: `Shape` and `Config` are
/// programming or configuration mistakes, `Input`/`Data` blame the caller's
/// files or arguments, `Format`/`Corrupt` blame a checkpoint on disk, and
/// `Undefined`/`NonFinite`/`Degenerate` report numerical conditions that the
/// caller must decide how to handle.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    Shape(String),
    /// A configuration struct violates one of its invariants.
    Config(String),
    /// A user-supplied argument or file is unusable (missing file, empty
    /// sentence, unknown label, ...).
    Input(String),
    /// A specific line of a data file could not be parsed.
    Data { line: usize, msg: String },
    /// A checkpoint does not start with the expected magic/version/header.
    Format(String),
    /// A checkpoint parsed structurally but its payload is inconsistent.
    Corrupt(String),
    /// A statistic has no defined value on this input (e.g. correlation of a
    /// constant sequence).
    Undefined(String),
    /// Training produced a non-finite loss or gradient.
    NonFinite(String),
    /// A reduction saw no valid elements (e.g. an all-padding row).
    Degenerate(String),
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Data { line, msg } => write!(f, "data error at line {line}: {msg}"),
            Error::Format(m) => write!(f, "checkpoint format error: {m}"),
            Error::Corrupt(m) => write!(f, "checkpoint corruption: {m}"),
            Error::Undefined(m) => write!(f, "undefined value: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Degenerate(m) => write!(f, "degenerate input: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
