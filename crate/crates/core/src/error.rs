use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value failed validation. `path` is the dotted key path.
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate channel: beamformer requested for an all-zero channel vector")]
    DegenerateChannel,

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("replay buffer holds {have} transitions, batch needs {need}")]
    InsufficientReplay { have: usize, need: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("allocation constraint violated at slot {slot}: {msg}")]
    Constraint { slot: u32, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors that come from user-supplied configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
