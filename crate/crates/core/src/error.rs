use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("empty agent stack")]
    EmptyStack,

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("expected a scalar output, got {0} elements")]
    NonScalar(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("rejection sampling exceeded {0} attempts")]
    SamplingExhausted(usize),

    #[error("dataset line {line}: {msg}")]
    Dataset { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::EmptyStack => "empty_stack",
            Error::MissingGradient(_) => "missing_gradient",
            Error::UnknownParam(_) => "unknown_param",
            Error::DuplicateParam(_) => "duplicate_param",
            Error::NonScalar(_) => "non_scalar",
            Error::Config(_) => "config",
            Error::UnknownMethod(_) => "unknown_method",
            Error::UnknownVariant(_) => "unknown_variant",
            Error::SamplingExhausted(_) => "sampling_exhausted",
            Error::Dataset { .. } => "dataset",
            Error::Checkpoint(_) => "checkpoint",
            Error::Geometry(_) => "geometry",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
