//! Experiment driver: configuration, training runs, and the probes run on
//! trained models.

pub mod config;
pub mod export;
pub mod gradcheck;
pub mod metrics;
pub mod run;
pub mod swap;
pub mod sweep;
