use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The signed measure cannot be balanced through zero-density regions.
    #[error("infeasible support: component imbalance {imbalance:e} at cell {cell}")]
    InfeasibleSupport { cell: usize, imbalance: f64 },

    /// A curve slice has infinite action.
    #[error("infinite action on slices {slices:?}")]
    InfiniteAction { slices: Vec<usize> },

    #[error("instance with {cells} cells exceeds the exact-solver limit of {limit}")]
    SizeLimit { cells: usize, limit: usize },

    #[error("no convergence after {iterations} iterations (residual {residual:e}): {detail}")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        detail: String,
    },

    #[error("linear solve failed: {0}")]
    LinearSolveFailure(String),

    #[error("tau {tau} exceeds g(eps_max) = {g_max}")]
    ScheduleOutOfRange { tau: f64, g_max: f64 },

    #[error("target has mass at cell {cell} that no kernel row reaches")]
    InfeasibleTarget { cell: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
