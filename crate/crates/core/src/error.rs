use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition (e.g. skill parameters out of bounds).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("simulation fault at substep {substep}: {reason}")]
    Simulation { substep: usize, reason: String },

    #[error("non-finite gradient at substep {substep}, stage {stage}")]
    Gradient { substep: usize, stage: &'static str },

    #[error("optimisation fault at epoch {epoch}: {reason}")]
    Optimisation { epoch: usize, reason: String },

    /// A fault raised while evaluating one optimisation epoch.
    #[error("epoch {epoch}: {source}")]
    AtEpoch {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_epoch(self, epoch: usize) -> Self {
        Error::AtEpoch {
            epoch,
            source: Box::new(self),
        }
    }

    /// The innermost error, without epoch context.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtEpoch { source, .. } => source.root(),
            other => other,
        }
    }

    /// Attaches a substep index to a simulation fault raised without one.
    pub(crate) fn at_substep(self, substep: usize) -> Self {
        match self {
            Error::Simulation { reason, .. } => Error::Simulation { substep, reason },
            other => other,
        }
    }
}

/// Fault raised inside a kernel; the substep index is filled in by the caller.
pub(crate) fn fault(reason: impl Into<String>) -> Error {
    Error::Simulation {
        substep: 0,
        reason: reason.into(),
    }
}
