//! Pipeline orchestration over `mel-core`: configuration, synthetic data,
//! file-based stages and run comparison.

pub mod compare;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod synthetic;
pub mod workflow;

pub use config::{PipelineConfig, Profile};
pub use error::{CliError, CliResult};
