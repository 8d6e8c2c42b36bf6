use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinalgError {
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("bin width {width} is invalid for a grid of {grid_size} points")]
    InvalidBinWidth { width: usize, grid_size: usize },
    #[error("grid has {0} points, at least 3 are required")]
    GridTooSmall(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("dataset failed validation with {0} error(s)")]
    InvalidDataset(usize),
    #[error("{failed} of {total} local fits failed")]
    PipelineFailure { failed: usize, total: usize },
    #[error("no subject has two or more visits, level-2 covariance is not estimable")]
    Level2Inestimable,
    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),
    #[error("invalid downsample: {0}")]
    InvalidDownsample(String),
    #[error("invalid score model: {0}")]
    InvalidScoreModel(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no completed run found in {0}")]
    NoRunFound(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used in error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidBinWidth { .. } => "InvalidBinWidth",
            Error::GridTooSmall(_) => "GridTooSmall",
            Error::InvalidGrid(_) => "InvalidGrid",
            Error::InvalidDataset(_) => "InvalidDataset",
            Error::PipelineFailure { .. } => "PipelineFailure",
            Error::Level2Inestimable => "Level2Inestimable",
            Error::InvalidCovariance(_) => "InvalidCovariance",
            Error::InvalidDownsample(_) => "InvalidDownsample",
            Error::InvalidScoreModel(_) => "InvalidScoreModel",
            Error::GridMismatch(_) => "GridMismatch",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::NoRunFound(_) => "NoRunFound",
            Error::Parse(_) => "Parse",
            Error::Linalg(_) => "Linalg",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
