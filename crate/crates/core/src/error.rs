use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] ndgrad::GradError),
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("{what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: String, version: u8 },
    #[error("{path}: truncated ({detail})")]
    Truncated { path: String, detail: String },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub(crate) fn ensure_positive(what: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositive { what, value })
    }
}
