use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("time {t} is outside the valid domain of {what}")]
    TimeOutOfDomain { t: f64, what: &'static str },
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("unsupported jump law: {0}")]
    UnsupportedJumpLaw(String),
    #[error("posterior unavailable: {0}")]
    PosteriorUnavailable(String),
    #[error("CFL condition violated: dt = {dt:e} exceeds the stable limit {limit:e}")]
    CflViolation { dt: f64, limit: f64 },
    #[error("{dropped} of {total} trajectories hit a non-finite state (first at t = {first_time})")]
    NonFiniteState { dropped: usize, total: usize, first_time: f64 },
    #[error("incompatible loss: {0}")]
    IncompatibleLoss(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
