//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on the inputs was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A numerical routine failed (non-convergence, singular matrix, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// EM could not keep all mixture components populated.
    #[error("degenerate mixture fit: {0}")]
    DegenerateFit(String),

    /// An encoded message could not be decoded.
    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    /// Not every client delivered an upload for the round.
    #[error("round {round} incomplete: missing uploads from clients {missing:?}")]
    RoundIncomplete { round: u32, missing: Vec<u32> },

    /// Failure inside one client's pipeline.
    #[error("client {client_id}: {source}")]
    Client {
        client_id: u32,
        #[source]
        source: Box<Error>,
    },

    /// Malformed CSV content.
    #[error("parse error in {path} at line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    /// Experiment configuration rejected before any compute.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn for_client(self, client_id: u32) -> Self {
        match self {
            e @ Error::Client { .. } => e,
            other => Error::Client {
                client_id,
                source: Box::new(other),
            },
        }
    }
}
