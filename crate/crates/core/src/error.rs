use thiserror::Error;

/// Errors produced by estimation, model selection and the study harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("singular design for candidate `{candidate}`: {detail}")]
    SingularDesign { candidate: String, detail: String },

    #[error("singular matrix in {context} (condition estimate {cond:.3e})")]
    SingularMatrix { context: &'static str, cond: f64 },

    #[error(
        "maximum-likelihood fit did not converge after {iterations} iterations \
         (gradient norm {grad_norm:.3e})"
    )]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("criterion regime mismatch: plugins computed for {plugins}, requested {requested}")]
    RegimeMismatch { plugins: String, requested: String },

    #[error("true potential-outcome means are required for this oracle but absent")]
    MissingTruth,

    #[error("no criterion reports to select from")]
    EmptySelection,

    #[error("invalid study configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "study aborted: {failures} of {total} replications failed (limit {limit:.2}%); \
         first failure: {first}"
    )]
    StudyAborted {
        failures: usize,
        total: usize,
        limit: f64,
        first: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
