//! Dataset manifests, feature caching, model files, experiment
//! configuration and execution, and the `dvk` command-line tool.

pub mod cache;
pub mod config;
pub mod dims;
mod error;
pub mod imageio;
pub mod manifest;
pub mod models;
pub mod pipeline;
pub mod plot;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
