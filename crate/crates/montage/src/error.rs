use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by the library modules.
#[derive(Debug, Error)]
pub enum MontageError {
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("referential integrity: {kind} id {id} is not defined")]
    DanglingReference { kind: &'static str, id: i64 },

    #[error("invalid bounding box: {0}")]
    InvalidBBox(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    #[error("invalid template: {0}")]
    InvalidTemplate(String),

    #[error("sample group violation: {0}")]
    GroupViolation(String),

    #[error("empty sample group {group}; rerun with --relax-groups to refill from S-samples")]
    EmptyGroup { group: &'static str },

    #[error("shape mismatch in {layer}: expected {expected}, got {got}")]
    ShapeMismatch {
        layer: String,
        expected: String,
        got: String,
    },

    #[error("degenerate ERF: total gradient mass is zero")]
    DegenerateErf,

    #[error("dataset has no annotations; cannot build a sample set")]
    NoPositives,

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iter} (lr {lr}): {detail}")]
    NonFiniteLoss { iter: u64, lr: f64, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),
}

pub type Result<T> = std::result::Result<T, MontageError>;
