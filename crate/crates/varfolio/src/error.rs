//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes surfaced by the library.
///
/// The CLI maps these onto stable exit codes: data problems (`Io`, `Parse`)
/// exit 2, numerical problems (`NotPositiveDefinite`, `Numerical`,
/// `CostCap`) exit 3, everything caught at argument level exits 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inputs have inconsistent or out-of-range dimensions.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller-supplied value is invalid (negative risk aversion, zero
    /// wealth where weights are requested, empty horizon, ...).
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A matrix required to be symmetric positive definite is not, within
    /// the construction tolerance.
    #[error("not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// Underlying I/O failure while reading or writing files.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Malformed text input; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Numerical routine failed to converge or produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A quadrature or optimization request exceeds the oracle's cost model.
    #[error("cost cap exceeded: {0}")]
    CostCap(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
