//! Command-line front door and file formats for the few-shot segmentation
//! workbench: dataset generation, backbone pretraining, episodic training,
//! evaluation, ablation grids and prior-mask visualization.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod engine;
pub mod error;
pub mod pnm;

pub use config::{RunConfig, Variant};
pub use error::{CliError, Result};
