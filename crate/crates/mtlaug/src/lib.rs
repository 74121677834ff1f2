//! Filesystem, configuration and command-line layer over `mtlaug-core`:
//! WAV and manifest IO, the feature cache, checkpoints, reports and a
//! thread-pool runner for independent folds.

pub mod audio;
pub mod cache;
pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod log;
pub mod report;
pub mod runner;

pub use error::{Error, Result};
