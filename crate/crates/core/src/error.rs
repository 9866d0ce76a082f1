use std::path::PathBuf;

use crate::autodiff::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// Invalid configuration value; the message names the key.
    #[error("config: {0}")]
    Config(String),

    /// Token count, grid or alignment violation at the model level.
    #[error("shape: {0}")]
    Shape(String),

    #[error("prompt hook at layer {layer} returned shape {got:?}, expected {expected:?}")]
    HookShape { layer: usize, expected: Vec<usize>, got: Vec<usize> },

    /// Degenerate geometric or annotation input.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{}{}: {msg}", path.display(), line.map(|l| format!(":{l}")).unwrap_or_default())]
    Format { path: PathBuf, line: Option<usize>, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("foundation checkpoint hash mismatch: delta expects {expected}, found {found}")]
    FoundationMismatch { expected: String, found: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), line, msg: msg.into() }
    }
}
