use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument or input violates a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two tensors, images or parameter sets disagree in shape.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Average Hausdorff distance between point sets where one side is empty.
    #[error("distance undefined for an empty point set")]
    UndefinedDistance,

    /// A file did not parse as the expected format.
    #[error("format error: {0}")]
    Format(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
