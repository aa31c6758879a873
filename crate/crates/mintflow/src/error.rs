//! Crate-wide error type.
//!
//! Variants are grouped by failure class so the CLI can map them onto
//! stable exit codes (config 2, io 3, divergence 4, audit failure 5).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("unknown tape node id {0}")]
    UnknownNode(usize),

    #[error("backward requires a scalar output node, got shape {got}")]
    NonScalarOutput { got: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("fixed-point iteration diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("bisection bracket not found for coordinate {coord} after {doublings} doublings")]
    BracketFailed { coord: usize, doublings: usize },

    #[error("bad IDX magic number: got {got:#010x}, expected {expected:#010x}")]
    IdxBadMagic { got: u32, expected: u32 },

    #[error("truncated IDX file: needed {needed} bytes, got {got}")]
    IdxTruncated { needed: usize, got: usize },

    #[error("IDX dimension mismatch: {detail}")]
    IdxDimMismatch { detail: String },

    #[error("checkpoint format tag mismatch: got {got:?}, expected {expected:?}")]
    CheckpointVersion { got: String, expected: String },

    #[error("checkpoint is missing tensor {name:?}")]
    CheckpointMissingTensor { name: String },

    #[error("checkpoint tensor {name:?} has wrong shape: expected {expected}, got {got}")]
    CheckpointShape {
        name: String,
        expected: String,
        got: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("audit failed: {0}")]
    AuditFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code for the CLI: config 2, io 3, divergence 4, audit failure 5.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArg(_) => 2,
            Error::Io(_)
            | Error::IdxBadMagic { .. }
            | Error::IdxTruncated { .. }
            | Error::IdxDimMismatch { .. }
            | Error::CheckpointVersion { .. }
            | Error::CheckpointMissingTensor { .. }
            | Error::CheckpointShape { .. } => 3,
            Error::Divergence { .. } | Error::BracketFailed { .. } | Error::NonFinite { .. } => 4,
            Error::AuditFailed(_) => 5,
            _ => 1,
        }
    }
}
