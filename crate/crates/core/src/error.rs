use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SwfError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("state layouts differ: {0}")]
    LayoutMismatch(String),

    #[error("point behind camera (depth {0:.3e} m)")]
    BehindCamera(f64),

    #[error("triangulation failed: {0}")]
    TriangulationFailed(&'static str),

    #[error("nullspace projection failed: feature Jacobian is rank deficient")]
    ProjectionFailed,

    #[error("singular alignment transform (1 + beta^T alpha = {0:.3e})")]
    SingularTransform(f64),

    #[error("non-finite IMU sample at t = {0}")]
    NonFiniteSample(f64),

    #[error("basis is rank deficient")]
    RankDeficient,

    #[error("time {t} outside [0, {duration}]")]
    TimeOutOfRange { t: f64, duration: f64 },

    #[error("audit aborted: {0}")]
    AuditAborted(String),

    #[error("innovation covariance is not positive definite")]
    NotPositiveDefinite,

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, SwfError>;
