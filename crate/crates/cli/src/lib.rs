//! Experiment driver for feature-importance supervision studies.
//!
//! An experiment is a TOML config ([`config::ExperimentConfig`]) and an
//! output directory stamped with the config's hash ([`store::Store`]).
//! [`pipeline::Pipeline`] runs the stages `gen → train → eval → analyze`,
//! plus two-preset comparisons and ablation sweeps ([`sweep`]).

pub mod config;
pub mod pipeline;
pub mod store;
pub mod sweep;

pub use config::ExperimentConfig;
pub use pipeline::Pipeline;
