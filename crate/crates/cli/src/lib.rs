//! Command-line stages and the local JSON service of the fairboard audit.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod server;
pub mod synth;

pub use config::AnalysisConfig;
pub use error::{CliError, Result};
pub use pipeline::{run_all, run_stage, Stage};
