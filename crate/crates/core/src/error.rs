use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("spindle speed must be positive (got {0} s^-1)")]
    ZeroSpindleSpeed(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("query point ({x:.3}, {y:.3}) mm lies outside the heightfield")]
    OutOfBounds { x: f64, y: f64 },

    #[error("path velocity vanishes at t = {0} s")]
    DegeneratePath(f64),

    #[error("gain matrix {0} is not symmetric positive definite")]
    NonSpdGains(&'static str),

    #[error("tool left the workspace box at ({0:.2}, {1:.2}, {2:.2}) mm")]
    WorkspaceViolation(f64, f64, f64),

    #[error("tracking error {0:.2} mm exceeds the safety limit")]
    TrackingLimit(f64),

    #[error("simulation state became non-finite")]
    NonFiniteState,

    #[error("episode already finished; call reset first")]
    EpisodeFinished,

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("covariance matrix is singular even with jitter {0:e}")]
    SingularCovariance(f64),

    #[error("need at least {needed} pre-engagement records for bias estimation, found {found}")]
    InsufficientBaseline { needed: usize, found: usize },

    #[error("fit is rank deficient: {0}")]
    RankDeficient(String),

    #[error("Levenberg-Marquardt did not converge in {0} iterations")]
    NoConvergence(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Errors that end an episode without being a programming or config mistake.
    pub fn is_safety_stop(&self) -> bool {
        matches!(
            self,
            Error::WorkspaceViolation(..) | Error::TrackingLimit(_) | Error::NonFiniteState
        )
    }
}
