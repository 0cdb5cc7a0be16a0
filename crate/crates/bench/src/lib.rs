//! Experiment orchestration for diffusion-based test-time adaptation:
//! configuration, the gen-data/train/adapt pipeline, sweeps and reports.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod store;

pub use config::RunConfig;
pub use error::{BenchError, Result};
pub use pipeline::Method;
