//! Std companion to `motia-core`: file formats, JSON run configuration,
//! manifests and the `motia` command line.

mod binio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod frames;
pub mod manifest;
pub mod tables;
pub mod threads;
pub mod vtn;

pub use error::{Error, Result};
