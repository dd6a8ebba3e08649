//! Run management, file formats and the command-line front end for
//! `hyperdisc-core`.

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod json;
pub mod pipeline;

pub use config::{RunConfig, Stage};
pub use error::{PipelineError, Result};
pub use pipeline::{run_calibration, run_discovery, DiscoveryRun, RunOptions};
