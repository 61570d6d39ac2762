//! Scenario configuration and experiment pipelines.

pub mod config;
pub mod pipeline;
pub mod scenario;
pub mod wave;
