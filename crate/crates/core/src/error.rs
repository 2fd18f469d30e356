use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid distribution at {location}: {reason}")]
    InvalidDistribution { location: String, reason: String },

    #[error("value out of range at {location}: {value} not in [{lo}, {hi}]")]
    OutOfRange {
        location: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("policy belongs to the {found} but the {expected} was expected")]
    WrongSide {
        expected: &'static str,
        found: &'static str,
    },

    #[error("function class too large: layer {layer} would hold {size} members (cap {cap})")]
    ClassTooLarge { layer: usize, size: usize, cap: usize },

    #[error("enumeration of {atoms} joint atoms exceeds the cap of {cap}")]
    EnumerationCap { atoms: u128, cap: u128 },

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("missing run artifacts: {0}")]
    MissingArtifacts(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn pre(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}
