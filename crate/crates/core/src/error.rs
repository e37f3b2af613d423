use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("invalid basis specification: {0}")]
    InvalidBasis(String),

    #[error("penalty order {q} must satisfy 1 <= q <= order - 1 (order {order})")]
    InvalidPenaltyOrder { q: usize, order: usize },

    #[error("value {x} lies outside the basis domain [{a}, {b}]")]
    OutOfDomain { x: f64, a: f64, b: f64 },

    #[error("covariate `{0}` is missing")]
    MissingCovariate(String),

    #[error("model has no terms")]
    EmptyModel,

    #[error("invalid correlation parameters: {0}")]
    InvalidCorrelation(String),

    #[error("working correlation block is nearly singular (condition number {condition:.3e})")]
    NearSingularCorrelation { condition: f64 },

    #[error("correlation estimation is underdetermined: {0}")]
    EstimationUnderdetermined(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("penalty parameters must be nonnegative and finite, got {0}")]
    NegativeLambda(f64),

    #[error("penalized normal matrix is singular")]
    SingularSystem,

    #[error("leverage saturation: I - A_ii for subject {subject} is singular (condition number {condition:.3e})")]
    LeverageSaturation { subject: usize, condition: f64 },

    #[error("tr(A) = {trace} is not below N = {n_obs}")]
    TraceTooLarge { trace: f64, n_obs: usize },

    #[error("optimizer stalled after {iterations} iterations: {reason}")]
    OptimizerStall { iterations: usize, reason: String },

    #[error("grid has {points} points, above the cap of {cap}")]
    GridTooLarge { points: usize, cap: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("all candidates failed: {0}")]
    AllCandidatesFailed(String),

    #[error("too many bootstrap replicates failed ({dropped} of {total})")]
    BootstrapFailure { dropped: usize, total: usize },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// True for failures caused by user input or configuration rather than numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidBasis(_)
                | Error::InvalidPenaltyOrder { .. }
                | Error::MissingCovariate(_)
                | Error::EmptyModel
                | Error::InvalidCorrelation(_)
                | Error::DimensionMismatch(_)
                | Error::NegativeLambda(_)
                | Error::GridTooLarge { .. }
                | Error::InvalidInput(_)
                | Error::Io(_)
                | Error::Parse(_)
                | Error::OutOfDomain { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
