use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("cost matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotConvex { min_eigenvalue: f64 },

    #[error("quadratic program is unbounded below")]
    Unbounded,

    #[error("collision during a started lane change (clearance {clearance:.4} m at step {step})")]
    Collision { step: usize, clearance: f64 },

    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
