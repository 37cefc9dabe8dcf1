use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown layer kind `{0}`")]
    UnknownLayer(String),

    #[error("missing weight tensor `{0}`")]
    MissingWeight(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("schema violation at {location}: {message}")]
    Schema { location: String, message: String },

    #[error("could not place {persons} persons with separation {separation}px in a {width}x{height} image after {retries} retries (seed {seed})")]
    Placement {
        persons: usize,
        separation: f64,
        width: u32,
        height: u32,
        retries: usize,
        seed: u64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
