use thiserror::Error;

/// Errors surfaced by every layer of the detector.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate vector in {op}: norm {norm:e} is below 1e-12")]
    Degenerate { op: &'static str, norm: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("range error: {0}")]
    Range(String),

    #[error("archive error: {0}")]
    Archive(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("mining error: {0}")]
    Mining(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension { .. } => 2,
            Error::NonFinite(_) | Error::Degenerate { .. } => 4,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
