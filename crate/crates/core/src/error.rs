//! Error type shared across the pipeline, with a stable exit-code mapping.

use std::path::Path;

/// Unified error for all pipeline stages.
///
/// Variants map onto process exit codes: config errors exit 2, numeric
/// failures (including collapsed contexts/latents) exit 3, I/O exits 4, and
/// remote-protocol failures exit 5.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("numeric: {0}")]
    Numeric(String),
    /// Degenerate-geometry failures; the message names what collapsed
    /// ("collapsed context ..." or "collapsed latent ...").
    #[error("{0}")]
    Collapse(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("protocol: {0}")]
    Protocol(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) | Error::Collapse(_) => 3,
            Error::Io(_) => 4,
            Error::Protocol(_) => 5,
        }
    }

    /// Machine-readable error kind, used in CLI stderr output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::Collapse(_) => "collapse",
            Error::Io(_) => "io",
            Error::Protocol(_) => "protocol",
        }
    }

    /// I/O error annotated with the path it concerns.
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Error::Io(format!("{}: {}", path.display(), err))
    }
}
