//! File formats, dataset directories, run configuration and the command
//! implementations behind the `irk` binary.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod run;

pub use config::RunConfig;
pub use error::{IrkError, Result};
