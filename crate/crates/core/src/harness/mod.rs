//! Experiment harness: configuration, the training loop, and result files.

mod config;
mod output;
mod simulation;

pub use config::*;
pub use output::*;
pub use simulation::*;
