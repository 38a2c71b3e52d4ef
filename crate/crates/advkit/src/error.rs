//! Crate-wide error type.

use crate::attack::Norm;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("layer {layer}: expected input of length {expected}, got {actual}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        actual: usize,
    },

    #[error("tensor shape {shape:?} implies {expected} elements, data has {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("index {index} out of range (length {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite loss at epoch {epoch}, sample {sample}")]
    NonFiniteLoss { epoch: usize, sample: usize },

    #[error("{attack} requires an {expected} budget, got {actual}")]
    WrongNorm {
        attack: &'static str,
        expected: Norm,
        actual: Norm,
    },

    #[error("query budget exhausted after {completed} of {total} coordinates")]
    QueryBudgetExhausted {
        completed: usize,
        total: usize,
        /// Coordinates estimated before the budget ran out.
        partial: Vec<f64>,
    },

    #[error("oracle does not grant score access")]
    ScoreAccessRequired,

    #[error("boundary attack: init point is not misclassified")]
    InitNotMisclassified,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("parameter count {count} exceeds dense Hessian limit {limit}")]
    HessianTooLarge { count: usize, limit: usize },

    #[error("linear solve failed: {0}")]
    SolveFailed(String),

    #[error("trigger pattern norm {norm} exceeds visibility bound {bound}")]
    VisibilityBound { norm: f64, bound: f64 },

    #[error("clean-label crafting failed: {0}")]
    CraftingFailed(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("unsupported version {found:?}, expected {expected:?}")]
    Version {
        found: String,
        expected: &'static str,
    },

    #[error("unknown {what} {name:?}")]
    Unknown { what: &'static str, name: String },

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
