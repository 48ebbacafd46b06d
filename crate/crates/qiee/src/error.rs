use thiserror::Error;

/// Every failure the library can surface.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("data integrity error: {0}")]
    Integrity(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("convergence failure: {0}")]
    Convergence(String),
    #[error("sample size too small: need at least {needed} rows, got {got}")]
    SampleSize { needed: usize, got: usize },
    #[error("variance model degenerate: fitted variance is non-positive everywhere")]
    VarianceDegenerate,
    #[error("fit failed for role `{role}` in fold {fold}: {source}")]
    Fit {
        role: String,
        fold: usize,
        source: Box<Error>,
    },
    #[error("non-finite score at unit {unit} (theta = {theta})")]
    Evaluation { unit: usize, theta: f64 },
    #[error("no sign change in [{lo}, {hi}]; min |G| = {min_abs} at theta = {at}")]
    Bracketing {
        lo: f64,
        hi: f64,
        min_abs: f64,
        at: f64,
    },
    #[error("degenerate normalizer or variance: {0}")]
    Degeneracy(String),
    #[error("perturbation leaves (0,1): {0}")]
    Perturbation(String),
    #[error("cannot invert grid CDF at q = {q}: node values span [{min}, {max}]")]
    Inversion { q: f64, min: f64, max: f64 },
    #[error("not estimable: {0}")]
    Estimability(String),
    #[error("bootstrap rejected: {0}")]
    BootstrapRejected(String),
    #[error("unstable: {failed} of {total} runs failed (last error: {last})")]
    Instability {
        failed: usize,
        total: usize,
        last: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
