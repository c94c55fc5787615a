//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PatError {
    /// A vector fell at or below the norm floor where cosine geometry breaks down.
    #[error("degenerate vector in {context}: norm {norm:.3e} <= {floor:.0e}")]
    DegenerateVector {
        context: &'static str,
        norm: f64,
        floor: f64,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("missing attribute label at level {level}")]
    MissingLabel { level: usize },

    #[error("label {label} outside [0, {bound})")]
    InvalidLabel { label: usize, bound: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    /// Training aborts rather than clipping; a non-finite loss means a formula bug
    /// or a diverged run, and either should be loud.
    #[error("non-finite loss at iteration {iteration}: total={total} ms={ms} pat={pat}\n{dump}")]
    NonFiniteLoss {
        iteration: usize,
        total: f64,
        ms: f64,
        pat: f64,
        dump: String,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    ParseError {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("unsupported format version {found:?} (expected {expected:?})")]
    VersionMismatch { found: String, expected: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PatError>;
