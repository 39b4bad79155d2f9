use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// The gradient engine met an operation it cannot differentiate.
    #[error("unsupported primitive `{0}` on the gradient path")]
    Capability(String),

    #[error("adaptation error: {0}")]
    Adaptation(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty crop: {0}")]
    EmptyCrop(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("undefined loss: {0}")]
    UndefinedLoss(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Validation errors are caused by bad user input rather than a failure
    /// during computation.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Divergence { .. } | Error::Io(_))
    }
}
