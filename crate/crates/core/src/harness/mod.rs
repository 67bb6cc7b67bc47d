//! Training schedules, synthetic data, metrics and ablations.

pub mod config;
pub mod corpus;
pub mod metrics;
pub mod train;
pub mod ablate;
pub mod pipeline;
