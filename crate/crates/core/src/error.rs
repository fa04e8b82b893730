use std::path::PathBuf;

/// Errors produced by the depth-estimation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input of {height}x{width} is not divisible by 32; pad by {pad_h} rows and {pad_w} columns")]
    NeedsPadding {
        height: usize,
        width: usize,
        pad_h: usize,
        pad_w: usize,
    },

    #[error("sparse depth maps cannot be downscaled; render at target resolution instead")]
    SparseDownscale,

    #[error("no valid pixels: {0}")]
    NoValidPixels(&'static str),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
