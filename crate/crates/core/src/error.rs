use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the engine.
///
/// Variants are grouped by cause so the command-line front end can map them
/// onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Internal structure is inconsistent (unresolved abstraction, unknown
    /// feature index, duplicate registry id, malformed expression text).
    #[error("structural error: {0}")]
    Structural(String),

    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Numerical input violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),

    /// Dataset could not be ingested.
    #[error("{path}: {message}")]
    Ingest { path: PathBuf, message: String },

    /// Model prediction at the evaluation point is zero, so the relative
    /// sensitivity is undefined.
    #[error("elasticity undefined: prediction at the evaluation point is zero")]
    UndefinedElasticity,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
