use thiserror::Error;

/// Errors raised by model ingestion and the numerical pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed configuration or coefficient expression.
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    /// A model or grid invariant does not hold.
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// A caller-side precondition does not hold.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// A coefficient evaluated to NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An assembled operator lost the Z-matrix sign pattern.
    #[error("M-matrix sign pattern violated at row {row} (age {age}): {detail}")]
    SignPattern { row: usize, age: f64, detail: String },

    /// A one-step or dense matrix could not be factored.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// An iterative method did not reach its tolerance.
    #[error("{method} did not converge after {iterations} iterations (last residual {residual:e})")]
    NonConvergence {
        method: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// A corrected density left the nonnegative cone.
    #[error("negative density: minimum entry {min_u:e} below -{tol:e}")]
    NegativeDensity { min_u: f64, tol: f64 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn syntax_at(source: &str, offset: usize, message: impl Into<String>) -> Self {
        let prefix = &source[..offset.min(source.len())];
        let line = prefix.matches('\n').count() + 1;
        let column = prefix.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
        Error::Syntax {
            line,
            column,
            message: message.into(),
        }
    }
}
