//! Error taxonomy shared by the whole workspace.
//!
//! The CLI maps these onto exit codes: input/shape problems are exit 2,
//! fingerprint/version incompatibilities are exit 3, everything else 1.

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum ScgError {
    /// Tensor shapes or image dimensions do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad configuration value or unknown config key.
    #[error("config error: {0}")]
    Config(String),

    /// Extractor fingerprint or file format version mismatch.
    #[error("incompatible: {0}")]
    Incompatible(String),

    /// Malformed binary file (bad magic, truncated payload, ...).
    #[error("format error: {0}")]
    Format(String),

    /// NaN/Inf detected where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Dataset layout problem (unpaired sketch, missing directory, ...).
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, ScgError>;
