//! File formats, run orchestration and the command-line front end for `catsel-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod export;
pub mod orchestrate;

pub use error::{Error, FormatError, Result};
