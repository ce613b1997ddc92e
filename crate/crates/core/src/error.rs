use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("tabulated coefficient queried outside its table at (t={t}, x={x})")]
    OutOfTable { t: f64, x: f64 },

    #[error("singular tridiagonal system at row {row} (dt = {dt})")]
    SingularSystem { row: usize, dt: f64 },

    #[error("inner Newton iteration failed to converge at time {t} after {iterations} iterations")]
    InnerNonConvergence { t: f64, iterations: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("boundary point {x} at t={t} is too close to the domain edge for one-sided stencils")]
    BoundaryTooClose { t: f64, x: f64 },

    #[error("point (t={t}, x={x}) lies within one stencil of the free boundary")]
    NearFreeBoundary { t: f64, x: f64 },

    #[error("second derivative of the objective functional is unavailable")]
    MissingSecondDerivative,

    #[error("negative intensity {value} encountered at (t={t}, x={x})")]
    NegativeIntensity { t: f64, x: f64, value: f64 },

    #[error("conditional estimator requires stored hazard integrals")]
    MissingHazard,

    #[error("invalid Monte-Carlo configuration: {0}")]
    InvalidMonteCarlo(String),

    #[error("epsilon {eps} exceeds the admissible range ({reason})")]
    EpsilonOutOfRange { eps: f64, reason: String },

    #[error("GBM closed form requires rho in (0, 1/2), got {0}")]
    InvalidGbm(f64),

    #[error("closed form requires x > 0, got {0}")]
    NonPositiveState(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
