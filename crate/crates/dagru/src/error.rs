use thiserror::Error;

/// Crate-wide error type. File-format problems keep distinct variants so
/// callers (and tests) can tell bad magic, wrong version and truncation apart.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad magic in {context}: expected {expected:?}")]
    BadMagic {
        context: &'static str,
        expected: &'static str,
    },

    #[error("unsupported {context} version {found} (supported: {supported})")]
    UnsupportedVersion {
        context: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("truncated {context}: {detail}")]
    Truncated {
        context: &'static str,
        detail: String,
    },

    #[error("corrupt {context}: {detail}")]
    Corrupt {
        context: &'static str,
        detail: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
