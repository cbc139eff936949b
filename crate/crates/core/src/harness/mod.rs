//! Experiment configuration, sweeps, records and plots.

pub mod checks;
pub mod commands;
pub mod config;
pub mod plot;
pub mod records;
