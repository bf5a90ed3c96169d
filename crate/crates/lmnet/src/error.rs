use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("element count overflows usize for shape {0:?}")]
    SizeOverflow(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("weights container: {0}")]
    Weights(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("gradient: {0}")]
    Autodiff(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code contract: 2 for validation failures, 3 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Image(_) => 3,
            _ => 2,
        }
    }
}
