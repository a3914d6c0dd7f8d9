use thiserror::Error;

/// Errors surfaced by the library.
///
/// Programmer-level precondition failures on hot paths (out-of-range texel
/// indices, mismatched transport dimensions) panic instead; everything that
/// can be triggered by data or files is reported here.
#[derive(Debug, Error)]
pub enum NelfError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, NelfError>;
