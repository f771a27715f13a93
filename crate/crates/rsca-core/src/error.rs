use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Array extents are inconsistent with what an operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// A scalar parameter is outside its admissible range.
    #[error("parameter error: {0}")]
    Param(String),

    /// Degenerate or otherwise unusable polygon input.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Malformed file contents (bad magic, truncated payload, bad JSON).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }
    pub fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
