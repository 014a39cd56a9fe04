pub mod config;
pub mod datasets;
pub mod harness;
pub mod learner;
pub mod metrics;
pub mod report;
pub mod rng;
pub mod scenarios;
pub mod strategies;
