use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point maps to infinity (|z| = {0:e})")]
    PointAtInfinity(f64),
    #[error("homography is not invertible (|det| = {0:e})")]
    Singular(f64),
    #[error("dimensions {height}x{width} are not multiples of 8")]
    NotGridAligned { height: usize, width: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
