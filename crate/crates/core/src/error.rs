use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Extents do not line up for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Structurally valid shapes but an inconsistent layer configuration
    /// (groups not dividing channels, zero-sized hidden layer, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A precondition on the caller was violated, e.g. backward from a
    /// non-scalar node.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    /// A forward value or a probed function value became NaN or infinite.
    #[error("non-finite value produced by {op} in `{scope}`")]
    NonFinite { op: &'static str, scope: String },

    #[error("statistics error: {0}")]
    Statistics(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}
