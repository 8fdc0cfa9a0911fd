use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Process exit codes of the command-line tool.
pub mod exit {
    pub const SUCCESS: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERIC: u8 = 4;
}

/// Position of a parse error inside a file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Location {
    Line(usize),
    Offset(u64),
}

impl std::fmt::Display for Location {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Location::Line(l) => write!(f, "line {l}"),
            Location::Offset(o) => write!(f, "byte offset {o}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{}: unsupported format `{extension}`", path.display())]
    UnknownFormat { path: PathBuf, extension: String },

    #[error("{}: {at}: {detail}", path.display())]
    Parse { path: PathBuf, at: Location, detail: String },

    #[error("checkpoint {}: {detail}", path.display())]
    Checkpoint { path: PathBuf, detail: String },

    #[error("{}: {detail}", path.display())]
    Config { path: PathBuf, detail: String },

    /// At least one equivariance contract failed.
    #[error("{failed} of {total} contract checks failed")]
    Verification { failed: usize, total: usize },

    #[error(transparent)]
    Core(#[from] vntpose_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn exit_code(&self) -> u8 {
        use vntpose_core::Error as Core;
        match self {
            Error::Usage(_) | Error::Config { .. } => exit::USAGE,
            Error::Io { .. } | Error::UnknownFormat { .. } | Error::Parse { .. } | Error::Checkpoint { .. } => exit::DATA,
            Error::Verification { .. } => exit::NUMERIC,
            Error::Core(Core::NonFinite { .. } | Core::NonFiniteLoss { .. } | Core::DegeneratePose { .. }) => exit::NUMERIC,
            Error::Core(_) => exit::DATA,
        }
    }

    pub(crate) fn parse(path: &Path, at: Location, detail: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_path_buf(),
            at,
            detail: detail.into(),
        }
    }
}

/// Attach a path to an IO error.
pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
