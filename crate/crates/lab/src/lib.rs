//! Configuration, file formats and experiment drivers for `bsam-core`.
//!
//! The `bsam` binary wraps these drivers; everything here is also usable
//! in-process, which is how the acceptance suite runs.

pub mod config;
mod error;
pub mod formats;
pub mod run;

pub use config::{parse_config, parse_config_with, ExperimentConfig};
pub use error::{LabError, Result};
