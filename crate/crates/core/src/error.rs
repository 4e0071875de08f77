use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("illumination index {index} out of range for a stack of {count}")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("operator is identically zero (power iteration stagnated at 0)")]
    ZeroOperator,

    #[error("{solver} did not converge after {iterations} iterations (relative residual {residual:e}){hint}")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
        hint: &'static str,
    },

    #[error("iterate diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("invalid network weights: {0}")]
    InvalidWeights(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// True for the failure modes the CLI reports as non-convergence.
    pub fn is_non_convergence(&self) -> bool {
        matches!(self, Error::NonConvergence { .. } | Error::Diverged { .. })
    }
}

/// Binary container decoding failures. Each corruption mode is a distinct variant.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("corrupt container: {0}")]
    Corrupt(String),

    #[error("missing entry {0:?}")]
    MissingEntry(String),

    #[error("invariant violated: {0}")]
    Invariant(String),
}
