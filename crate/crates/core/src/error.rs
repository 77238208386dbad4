use thiserror::Error;

/// Failures surfaced by the numeric pipeline.
///
/// Policy is fail-fast: non-finite values abort the computation that
/// produced them with the offending node or quantity named, rather than
/// being silently propagated.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },

    #[error("matrix not positive definite{}", .context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    NotPositiveDefinite { context: Option<String> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    WrongMagic {
        path: String,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated, needed {needed} bytes, had {had}")]
    Truncated {
        path: String,
        needed: usize,
        had: usize,
    },

    #[error("{path}: {detail}")]
    CountMismatch { path: String, detail: String },

    #[error("{path}: unsupported format version {found}")]
    UnsupportedVersion { path: String, found: u32 },

    #[error("chain mixing failure: min ESS {min_ess:.1} below floor {floor:.1} on task {task}")]
    MixingFailure {
        min_ess: f64,
        floor: f64,
        task: String,
    },

    #[error("{0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
