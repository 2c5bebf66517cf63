use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("input {height}x{width} is smaller than the minimum {min}x{min} (total downsampling factor)")]
    InputTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("resolution {value} is not a multiple of the downsampling factor {factor}")]
    NotMultiple { value: usize, factor: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated checkpoint in entry {entry:?}")]
    Truncated { entry: String },

    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),

    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),

    #[error("non-finite gradient for parameter {0:?}; step aborted")]
    NanGradient(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
