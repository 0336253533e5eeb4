use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A caller violated an operation's length/shape contract.
    #[error("{context}: length mismatch, expected {expected}, got {actual}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A precondition that is not a plain length mismatch.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Central-difference probing produced a non-finite loss value.
    #[error("non-finite loss while probing parameter coordinate {coord}")]
    NonFiniteProbe { coord: usize },

    /// Training hit a non-finite loss and was aborted.
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    /// A read was issued against a bank with no occupied slots.
    #[error("no memory stored")]
    EmptyBank,

    #[error("{path}: {reason} (byte {offset})")]
    PgmParse {
        path: String,
        reason: String,
        offset: usize,
    },

    #[error("{path}:{line}: {reason}")]
    CsvParse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }
}
