use thiserror::Error;

use crate::checkpoint::Checkpoint;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar((usize, usize)),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("insufficient accuracy: {0}")]
    Accuracy(String),

    #[error("invalid configuration key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint format version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },

    #[error("non-finite gradient in parameter `{param}` at epoch {epoch}")]
    NonFiniteGradient { param: String, epoch: usize },

    /// Training diverged. Carries the parameters from the end of the last epoch whose
    /// every batch produced a finite loss, when one exists.
    #[error("non-finite loss at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_good: Option<Box<Checkpoint>>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
