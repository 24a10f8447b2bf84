use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration values (empty ranges, mismatched sizes, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument outside the mathematical domain of a formula.
    #[error("domain error: {0}")]
    Domain(String),

    /// A link with zero achievable rate (zero transmit power or zero gain).
    #[error("infeasible link: {0}")]
    InfeasibleLink(String),

    /// A resource-allocation instance with no finite-time feasible point.
    #[error("infeasible allocation: {0}")]
    Infeasible(String),

    /// A caller violated a documented contract (missing map entry, shape mismatch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An instance too large for an exhaustive method.
    #[error("instance too large: {0}")]
    TooLarge(String),

    /// Non-finite values encountered during training.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
