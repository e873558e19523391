pub mod config;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod pipeline;
pub mod rules;
pub mod training;

pub use config::{load_config, RunConfig, RunManifest};
pub use error::{Error, ErrorKind, Result};
