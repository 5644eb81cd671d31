use std::path::PathBuf;

/// Errors raised by the sampling library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("covariance is not symmetric positive-definite: {0}")]
    NotPositiveDefinite(String),

    #[error("prior does not provide {0}")]
    UnsupportedCapability(&'static str),

    #[error("measurement noise level must be non-negative, got {0}")]
    NegativeNoise(f64),

    #[error("dense matrix of {rows}x{cols} exceeds the cap of {cap} entries")]
    DenseCapExceeded { rows: usize, cols: usize, cap: usize },

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("non-finite state at timestep {t}: {detail}")]
    NonFinite { t: usize, detail: String },

    #[error("image format: {0}")]
    ImageFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the configuration rather than by the run itself.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::InvalidRange(_) | Error::NotPositiveDefinite(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
