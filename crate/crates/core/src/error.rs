use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("simulation diverged at t = {t}: q = {q:?}, qdot = {qdot:?}")]
    Diverged { t: f64, q: Vec<f64>, qdot: Vec<f64> },

    #[error("inverse kinematics did not converge (residual {residual:.3e} m)")]
    IkNotConverged { residual: f64 },

    #[error("time went backwards: {now} < {last}")]
    TimeRegression { now: f64, last: f64 },

    #[error("not ready: {0}")]
    NotReady(&'static str),

    #[error("training diverged at update {update}: loss = {loss}")]
    TrainingDiverged { update: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
