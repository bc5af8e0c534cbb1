use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {index} = {value} is outside [{lo}, {hi}]")]
    ParamRange {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("{0} is frozen; refusing to update its weights")]
    Frozen(String),
    #[error("{0} must be frozen before it is used inside a loss")]
    NotFrozen(String),
    #[error("non-finite gradient; optimizer step rejected")]
    NonFiniteGradient,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("digest mismatch for {what}: expected {expected}, found {found}")]
    Digest {
        what: String,
        expected: String,
        found: String,
    },
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("image format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Validation errors map to CLI exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_)
                | Error::MissingArtifact(_)
                | Error::ParamRange { .. }
                | Error::Format(_)
                | Error::Digest { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
