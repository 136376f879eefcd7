use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point {0:?} lies outside the domain")]
    OutsideDomain(Vec<f64>),

    #[error("requested window of {requested} steps exceeds the absorption step {tau}")]
    WindowExceedsAbsorption { requested: usize, tau: usize },

    #[error("path replay diverged from the recorded states at step {step}")]
    ReplayMismatch { step: usize },

    #[error("eta must be strictly positive, got {value} at {point:?}")]
    NonPositiveEta { value: f64, point: Vec<f64> },

    #[error("cell {0} contains no domain points")]
    EmptyCell(usize),

    #[error("matrix is not substochastic: {0}")]
    NotSubstochastic(String),

    #[error("quasi-stationary measure is not unique: |λ1| = {lambda1}, |λ2| = {lambda2}")]
    NonUniqueQsd { lambda1: f64, lambda2: f64 },

    #[error("no survival: dominant eigenvalue {rho} is below tolerance")]
    NoSurvival { rho: f64 },

    #[error("eigen-solver failed to reach residual {tol} (left {left:e}, right {right:e})")]
    NotConverged { tol: f64, left: f64, right: f64 },

    #[error("insufficient survivors: {survivors} < {required} at t = {t}")]
    InsufficientSurvivors {
        survivors: usize,
        required: usize,
        t: f64,
    },

    #[error("eta floor excludes cells {cells:?}")]
    EtaFloor { cells: Vec<usize> },

    #[error("Q-process path was absorbed at step {step} (discretisation leakage)")]
    Leakage { step: usize },

    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("rank collapse in tangent frame at step {step}")]
    RankCollapse { step: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("missing spectral data: {0}")]
    MissingSpectralData(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
