//! Ingestion, configuration and commands behind the `trajgp` binary.

pub mod chainfile;
pub mod commands;
pub mod config;
pub mod error;
pub mod gps;
pub mod ingest;
pub mod split;

pub use error::{CliError, Result};
