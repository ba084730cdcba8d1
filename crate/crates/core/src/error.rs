use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("non-finite value at index {index} while building a field")]
    NonFinite { index: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {t} lies outside the stored history [{start}, {end}]")]
    OutOfHistory { t: f64, start: f64, end: f64 },

    #[error("time step {dt} violates the stability bound {limit}")]
    Cfl { dt: f64, limit: f64 },

    #[error("solver produced non-finite values at t = {t}")]
    BlowUp { t: f64 },

    #[error("condition violated: {0}")]
    Condition(String),

    #[error("residual {residual:e} exceeds tolerance {tolerance:e}")]
    ResidualTooLarge { residual: f64, tolerance: f64 },

    #[error("iteration diverged at level {level}")]
    Divergence { level: usize },

    #[error("iterate left the ball: norm {norm:e} >= radius {radius:e}")]
    BallExit { norm: f64, radius: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
