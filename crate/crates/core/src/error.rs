//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("canvas area {area} exceeds {limit}x the input area; homography likely diverged")]
    ExcessiveCanvas { area: usize, limit: f64 },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("bad shape: {0}")]
    BadShape(String),

    #[error("image {path} is too small: need at least {need_w}x{need_h}, got {got_w}x{got_h}")]
    ImageTooSmall {
        path: String,
        need_w: usize,
        need_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("unpaired file: {0}")]
    UnpairedFile(String),

    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },

    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadFractions(Vec<f64>),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("attack diverged: {0}")]
    AttackDiverged(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error in {what}: {reason}")]
    Parse { what: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
