use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the weight-similarity pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("capacity error: chain feature side {side} exceeds cap {cap}")]
    Capacity { side: usize, cap: usize },

    #[error("training diverged at epoch {epoch} (lr = {lr}): non-finite loss")]
    Divergence { epoch: usize, lr: f64 },

    #[error("task {task}, run {run}: {source}")]
    Run {
        task: usize,
        run: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("ingestion error in {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("checksum mismatch in {path}: manifest {expected:08x}, file {actual:08x}")]
    Checksum {
        path: PathBuf,
        expected: u32,
        actual: u32,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by invalid user configuration rather than by a failed run.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
