use thiserror::Error;

use crate::spectral::DysonSolution;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{side} margin entry {index} is not positive ({value})")]
    NonPositiveMargin {
        side: &'static str,
        index: usize,
        value: f64,
    },

    #[error("invalid margins: {0}")]
    InvalidMargins(String),

    #[error("matrix entry ({i}, {j}) is negative or not finite ({value})")]
    NegativeEntry { i: usize, j: usize, value: f64 },

    #[error("{side} {index} of the matrix is identically zero but its margin is positive")]
    EmptyLine { side: &'static str, index: usize },

    #[error("sinkhorn did not reach tolerance after {iterations} sweeps (margin error {margin_error:e})")]
    MaxIterations { iterations: usize, margin_error: f64 },

    #[error("exact scalability check supports m + n <= {cap}, got {size}")]
    TooLargeForExact { size: usize, cap: usize },

    #[error("zero pattern of the matrix differs from that of r c^T at ({i}, {j})")]
    ZeroPatternMismatch { i: usize, j: usize },

    #[error("matrix entry ({i}, {j}) is zero")]
    ZeroEntry { i: usize, j: usize },

    #[error("total mass must be positive, got {0}")]
    NonPositiveTotal(f64),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("row alignment is zero")]
    ZeroAlignment,

    #[error("unbounded cost: cell ({i}, {j}) has zero reference mass but positive product mass")]
    UnboundedCost { i: usize, j: usize },

    #[error("bernoulli mean must lie in (0, 1), got {0}")]
    BernoulliMeanOutOfRange(f64),

    #[error("infeasible experiment spec: {0}")]
    InfeasibleSpec(String),

    #[error("variance profile entry {value:e} exceeds the flatness cap {cap:e}")]
    FlatnessViolated { value: f64, cap: f64 },

    #[error("dyson iteration did not converge at tau = {tau} (eta = {eta:e})")]
    NoConvergence {
        tau: f64,
        eta: f64,
        partial: Box<DysonSolution>,
    },

    #[error("dyson iterate left the upper half-plane at tau = {tau} (eta = {eta:e})")]
    LeftHalfPlane { tau: f64, eta: f64 },

    #[error("eigensolver failure: {0}")]
    EigensolverFailure(String),

    #[error("expected a one-dimensional kernel, found dimension {0}")]
    RankDeficiencyUnexpected(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// True for failures of a numerical routine on otherwise valid input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::MaxIterations { .. }
                | Error::NoConvergence { .. }
                | Error::LeftHalfPlane { .. }
                | Error::EigensolverFailure(_)
                | Error::RankDeficiencyUnexpected(_)
                | Error::FlatnessViolated { .. }
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::NonPositiveMargin { .. } => "NonPositiveMargin",
            Error::InvalidMargins(_) => "InvalidMargins",
            Error::NegativeEntry { .. } => "NegativeEntry",
            Error::EmptyLine { .. } => "EmptyLine",
            Error::MaxIterations { .. } => "MaxIterations",
            Error::TooLargeForExact { .. } => "TooLargeForExact",
            Error::ZeroPatternMismatch { .. } => "ZeroPatternMismatch",
            Error::ZeroEntry { .. } => "ZeroEntry",
            Error::NonPositiveTotal(_) => "NonPositiveTotal",
            Error::GridMismatch(_) => "GridMismatch",
            Error::ZeroAlignment => "ZeroAlignment",
            Error::UnboundedCost { .. } => "UnboundedCost",
            Error::BernoulliMeanOutOfRange(_) => "BernoulliMeanOutOfRange",
            Error::InfeasibleSpec(_) => "InfeasibleSpec",
            Error::FlatnessViolated { .. } => "FlatnessViolated",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::LeftHalfPlane { .. } => "LeftHalfPlane",
            Error::EigensolverFailure(_) => "EigensolverFailure",
            Error::RankDeficiencyUnexpected(_) => "RankDeficiencyUnexpected",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Parse(_) => "Parse",
        }
    }
}
