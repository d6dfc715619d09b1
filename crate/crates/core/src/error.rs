use thiserror::Error;

use crate::gcnn::ParamSet;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("graph is not connected")]
    Disconnected,

    #[error("no connected sample found after {attempts} attempts")]
    GenerationFailed { attempts: usize },

    /// A node was asked to act on data it has not received, or received data it
    /// should not have. The synchronous scheduler is expected to rule these out.
    #[error("protocol violation at node {node}: {reason}")]
    Protocol { node: usize, reason: String },

    #[error("round plan violates causality at round {round}: {reason}")]
    Causality { round: usize, reason: String },

    /// Training diverged. `last_good` holds the node-average parameters from
    /// the last update whose values were all finite.
    #[error("non-finite value encountered after update {step}")]
    NonFinite {
        step: usize,
        last_good: Option<Box<ParamSet>>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn protocol(node: usize, reason: impl Into<String>) -> Self {
        Error::Protocol {
            node,
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
