//! Configuration, pipeline stages and the built-in experiment suite.

mod config;
mod experiment;
pub mod pipeline;

pub use config::{Config, SEED_ENV};
pub use experiment::{builtin_experiment, list_builtin_experiments, run_experiment, ExperimentSpec, Stage};
