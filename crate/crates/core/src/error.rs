use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("replica divergence: {0}")]
    ReplicaDivergence(String),
    #[error("stopped because another worker failed")]
    PeerFailure,
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error("incompatible: {0}")]
    Incompatible(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short identifier, used for machine-parsable error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::ReplicaDivergence(_) => "replica_divergence",
            Error::PeerFailure => "peer_failure",
            Error::InfeasibleSplit(_) => "infeasible_split",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Incompatible(_) => "incompatible",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
