use std::path::PathBuf;

use crate::idx::IdxError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("structural mismatch: {0}")]
    Structural(String),

    #[error("out of domain: {0}")]
    Domain(String),

    #[error("unsupported: {0}")]
    Capability(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Idx {
        path: PathBuf,
        #[source]
        source: IdxError,
    },

    #[error("repetition (z-draw {z_draw}, u-draw {u_draw}) failed: {source}")]
    Repetition {
        z_draw: usize,
        u_draw: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn capability(msg: impl Into<String>) -> Self {
        Error::Capability(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's inputs (bad flags, configs or
    /// parameters) rather than by something failing while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Parameter(_)
            | Error::Structural(_)
            | Error::Capability(_)
            | Error::Config(_) => true,
            Error::Repetition { source, .. } => source.is_validation(),
            Error::Domain(_) | Error::Io { .. } | Error::Idx { .. } => false,
        }
    }
}
