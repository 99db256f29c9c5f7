use std::fmt;
use std::io;

/// Errors raised by the dietcnn library.
///
/// The variants are grouped so that callers (the CLI in particular) can map
/// them onto failure classes: configuration, data and invariant violations.
#[derive(Debug)]
pub enum Error {
    /// Two shapes disagree along a named axis.
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },
    /// A layer or op received parameters it cannot work with.
    InvalidLayer(String),
    /// Bad arguments to an API call (k > K, empty bag, ...).
    InvalidArgument(String),
    /// A symbol id is outside the codebook it claims to index.
    SymbolOutOfRange {
        table: String,
        id: u32,
        limit: u32,
    },
    /// Training produced a non-finite loss.
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    /// Dataset file with the wrong magic number.
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },
    /// File ended before the declared payload.
    Truncated {
        path: String,
        expected: u64,
        found: u64,
    },
    /// Image and label files disagree on the number of items.
    CountMismatch {
        images: usize,
        labels: usize,
    },
    /// Persisted file carries a format version we do not read.
    VersionMismatch {
        expected: u32,
        found: u32,
    },
    /// Stored checksum does not match the payload.
    Checksum {
        expected: u32,
        found: u32,
    },
    /// Persisted data parsed but violates a structural invariant.
    Invariant(String),
    /// Malformed persisted data.
    Format(String),
    Io(io::Error),
    Json(serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape {
                op,
                axis,
                expected,
                actual,
            } => write!(
                f,
                "{op}: shape mismatch on axis `{axis}` (expected {expected}, got {actual})"
            ),
            Error::InvalidLayer(msg) => write!(f, "invalid layer: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::SymbolOutOfRange { table, id, limit } => {
                write!(f, "symbol {id} out of range in `{table}` (limit {limit})")
            }
            Error::Diverged { epoch, step, loss } => {
                write!(
                    f,
                    "training diverged at epoch {epoch}, step {step} (loss {loss})"
                )
            }
            Error::BadMagic {
                path,
                expected,
                found,
            } => write!(
                f,
                "bad magic in {path}: expected {expected:#010x}, found {found:#010x}"
            ),
            Error::Truncated {
                path,
                expected,
                found,
            } => write!(
                f,
                "truncated payload in {path}: expected {expected} bytes, found {found}"
            ),
            Error::CountMismatch { images, labels } => {
                write!(
                    f,
                    "image/label count mismatch: {images} images, {labels} labels"
                )
            }
            Error::VersionMismatch { expected, found } => {
                write!(
                    f,
                    "unsupported format version {found} (expected {expected})"
                )
            }
            Error::Checksum { expected, found } => write!(
                f,
                "checksum failure: stored {expected:#010x}, computed {found:#010x}"
            ),
            Error::Invariant(msg) => write!(f, "invariant violation: {msg}"),
            Error::Format(msg) => write!(f, "malformed file: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

impl Error {
    /// Coarse failure class used for process exit codes.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::InvalidLayer(_) | Error::Shape { .. } => {
                ErrorClass::Config
            }
            Error::SymbolOutOfRange { .. }
            | Error::Invariant(_)
            | Error::Checksum { .. }
            | Error::VersionMismatch { .. } => ErrorClass::Invariant,
            Error::Diverged { .. } => ErrorClass::Invariant,
            Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::CountMismatch { .. }
            | Error::Format(_)
            | Error::Io(_)
            | Error::Json(_) => ErrorClass::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Invariant,
}
