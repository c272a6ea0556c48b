use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Malformed or inconsistent files.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic { path: PathBuf, found: Vec<u8>, expected: Vec<u8> },
    #[error("{path}: format version {found}, this build reads {expected}")]
    VersionMismatch { path: PathBuf, found: u16, expected: u16 },
    #[error("{path}: truncated, {what} needs {needed} bytes but {available} are present")]
    Truncated { path: PathBuf, what: String, needed: u64, available: u64 },
    #[error("sample {index} out of range, split holds {count}")]
    OutOfBounds { index: usize, count: usize },
    #[error("{path}: {detail}")]
    Malformed { path: PathBuf, detail: String },
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] catsel_core::Error),
}

pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const DATA_FORMAT: i32 = 4;
    pub const RUNTIME: i32 = 5;
    pub const IO: i32 = 6;
}

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub fn exit_code(&self) -> i32 {
        use catsel_core::Error as C;
        match self {
            Error::Io { .. } => exit::IO,
            Error::Format(_) => exit::DATA_FORMAT,
            Error::Config(_) => exit::CONFIG,
            Error::Core(C::Config(_) | C::Argument(_) | C::Workflow(_) | C::Padding { .. } | C::Ratio { .. }) => exit::CONFIG,
            Error::Core(_) => exit::RUNTIME,
        }
    }
}
