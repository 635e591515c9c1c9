//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Architecture string rejected by the grammar.
    #[error("arch parse error at position {position}: {reason} (token {token:?})")]
    ArchParse {
        /// Byte offset of the offending token in the input.
        position: usize,
        /// The token that failed.
        token: String,
        /// What was wrong with it.
        reason: String,
    },

    /// Tensor or configuration shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value violates its invariants.
    #[error("config error: {0}")]
    Config(String),

    /// A non-finite value surfaced where a finite one is required.
    #[error("non-finite value in {what}")]
    NonFinite {
        /// What held the bad value (loss, parameter tensor, matrix entry).
        what: String,
    },

    /// Training aborted because the loss diverged.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged {
        /// Epoch index at which the abort happened.
        epoch: usize,
        /// What diverged.
        detail: String,
    },

    /// Dataset file malformed or empty.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Checkpoint archive malformed or mismatched.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A study was asked to evaluate more candidates than its budget cap.
    #[error("study budget exceeded: needs {required} evaluations, cap is {cap}")]
    BudgetExceeded {
        /// Number of evaluations the request implies.
        required: usize,
        /// Configured cap.
        cap: usize,
    },

    /// Wrapped I/O error.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
