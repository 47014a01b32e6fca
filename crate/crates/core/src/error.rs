//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("pair (A, B) is not controllable")]
    Uncontrollable,

    /// The Gramian Cholesky factorization failed: the window is too short or
    /// the system is numerically uncontrollable over it.
    #[error("gramian is numerically singular (min eigenvalue estimate {min_eig:.3e})")]
    GramianSingular { min_eig: f64 },

    #[error("invalid time window: {0}")]
    Window(String),

    #[error("time {tau} outside window [{t}, {r}]")]
    OutsideWindow { tau: f64, t: f64, r: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("ensemble is empty")]
    EmptyEnsemble,

    #[error("csv error at line {line}: {msg}")]
    Csv { line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step} (loss {loss:.3e})")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
