//! Configuration and pipeline behind the `cswitch` experiment runner.

pub mod config;
pub mod run;

pub use config::{Config, ConfigError};
pub use run::{Experiment, Solution};
