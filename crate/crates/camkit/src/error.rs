use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer extents do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Bad input data (empty dataset, NaN/Inf values, out-of-range labels).
    #[error("data error: {0}")]
    Data(String),

    /// A named layer does not exist.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// A forward trace does not carry the state an operation needs.
    #[error("state error: {0}")]
    State(String),

    /// Malformed file (bad magic, version, truncation).
    #[error("format error: {0}")]
    Format(String),

    /// Numeric failure, e.g. the training loss became NaN.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The network architecture does not support the requested operation.
    #[error("architecture error: {0}")]
    Architecture(String),

    /// A configuration value is outside its allowed range.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Wrap an I/O error with the path it concerns.
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
