//! Multi-task surgical-video pipeline at desk scale.
//!
//! The crate covers the full loop: a procedural generator for toy "surgery"
//! videos with hierarchical labels (phase, step, instrument boxes, atomic
//! actions), a multiscale pooling-attention video encoder, a deformable-
//! attention set-prediction detector, linear classification heads fed by
//! pooled video features and per-box detector features, the exact evaluation
//! protocol (frame-level mAP and detection mAP at 0.5 IoU over two folds),
//! and a deterministic training engine with warmup+cosine scheduling.

pub mod annotation;
pub mod config;
pub mod data;
pub mod detector;
pub mod encoder;
pub mod evaluation;
pub mod heads;
pub mod report;
pub mod synthetic;
pub mod training;

use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto exit codes.
#[derive(Debug, Error)]
pub enum TapirError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] tapir_autograd::params::CheckpointError),
    #[error("{0}")]
    Other(String),
}

impl TapirError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, TapirError>;
