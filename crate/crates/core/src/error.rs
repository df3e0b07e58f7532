use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward already ran on this graph; rebuild the forward pass first")]
    BackwardTwice,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty batch in {0}")]
    EmptyBatch(&'static str),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("bundle has no discriminator parameters")]
    MissingDiscriminator,

    #[error("parameter {index} has no gradient")]
    MissingGrad { index: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("line {line}: {message}")]
    ConfigLine { line: usize, message: String },

    #[error("target labels requested by a training path")]
    LabelLeakage,

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence { epoch: usize, step: usize, detail: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
