//! Configuration, dataset manifests, evaluation/ablation drivers, and the
//! command-line interface.

pub mod ablate;
pub mod cli;
pub mod config;
pub mod evaluate;
pub mod fixtures;
pub mod grid;
pub mod manifest;
pub mod record;

pub use config::Config;
pub use record::{atomic_write, RunRecord};
