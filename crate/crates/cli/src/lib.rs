//! Command-line harness for comparing original-form and auxiliary-form
//! inference on layered Gaussian latent-variable models.
//!
//! The library half holds everything the binary does, so experiments are
//! scriptable from tests and other tools:
//!
//! - [`data`]: dataset ingestion — IDX image files and synthetic
//!   dynamical-network sequences.
//! - [`models`]: builders for the two model families the experiments use.
//! - [`experiment`]: experiment configuration, single-form runs, and the
//!   two-form comparison driver.
//! - [`report`]: plateau detection and speedup summaries over convergence
//!   traces.

pub mod data;
pub mod experiment;
pub mod models;
pub mod report;

use std::io;

/// Errors from data loading, configuration, and experiment plumbing.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed input file: bad magic number, wrong dimensions,
    /// truncation.
    #[error("format error: {0}")]
    Format(String),
    /// A size or index outside the available range.
    #[error("range error: {0}")]
    Range(String),
    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] auxinfer_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
