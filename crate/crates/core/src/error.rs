//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by the simulator and audit toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A network spec, tap index, or shape wiring problem.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad runtime input (non-finite values, labels out of range, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Dataset generation failed (e.g. rejection sampling budget exhausted).
    #[error("generation error: {0}")]
    Generation(String),

    /// A LEAF shard could not be parsed.
    #[error("parse error in shard {shard}: {detail}")]
    Parse { shard: String, detail: String },

    /// Client dataset assignment could not be satisfied.
    #[error("assignment error: {0}")]
    Assignment(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
