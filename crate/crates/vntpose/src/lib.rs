//! File formats, run configuration, checkpoints and the commands of the
//! `vntpose` tool, on top of `vntpose-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{Error, Result};
