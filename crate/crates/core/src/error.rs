use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, sizes, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A forward or backward pass produced NaN or an infinity.
    #[error("numerical overflow in `{op}`")]
    NumericalOverflow { op: &'static str },

    /// A configuration value is out of range; `field` names the offending key.
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("invalid bound configuration: floor {floor} * classes {classes} must be < 1")]
    InvalidBound { floor: f64, classes: usize },

    /// `-log p[y]` with `p[y] = 0`.
    #[error("infinite loss: probability of class {class} is zero")]
    InfiniteLoss { class: usize },

    /// `KL[p | q]` with `q = 0` somewhere `p > 0`; a mathematical fact about the
    /// inputs, not a numeric failure.
    #[error("KL divergence is infinite: q vanishes where p > 0 (outcome {outcome})")]
    InfiniteKl { outcome: usize },

    /// An input falls outside the hypotheses of a checked statement.
    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
