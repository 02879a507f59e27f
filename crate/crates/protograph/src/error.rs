//! Error types shared across the crate.

use thiserror::Error;

/// Errors from tensor construction, graph operations, the optimizer, and
/// checkpoint I/O.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    BadShape(String),
    #[error("invalid operation: {0}")]
    Invalid(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Errors from dataset loading, generation, and manifest parsing.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-level error for the harness and CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("config error: {0}")]
    Config(String),
    #[error("run error: {0}")]
    Run(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
