//! Command implementations behind the `hdrlift` binary.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod exit;
pub mod pipeline;
pub mod run;

pub use config::{Preset, RunConfig};
