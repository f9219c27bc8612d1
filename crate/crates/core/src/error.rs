use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("degenerate input: vector norm {norm:e} is below the normalization threshold")]
    DegenerateNorm { norm: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("gradient check failed: {0}")]
    GradientMismatch(String),

    #[error("gradient requested for a non-scalar output of shape {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("malformed checkpoint header: {0}")]
    MalformedHeader(String),

    #[error("truncated checkpoint payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("checkpoint does not match configuration: {0}")]
    CheckpointMismatch(String),

    #[error("client {client} failed in round {round}: {source}")]
    ClientFailure {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

impl Error {
    pub(crate) fn dims(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for numeric breakdowns: NaN/inf, a degenerate norm, or a failed gradient check.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::DegenerateNorm { .. } | Error::GradientMismatch(_) => true,
            Error::ClientFailure { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
