use std::path::PathBuf;

/// Errors produced by the odometry toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate rotation: angle {angle} is within {margin} of pi")]
    DegenerateRotation { angle: f64, margin: f64 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite values in {layer}: {detail}")]
    Numeric { layer: String, detail: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("bad config key `{key}`: {message}")]
    Config { key: String, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            layer: layer.into(),
            detail: detail.into(),
        }
    }
}
