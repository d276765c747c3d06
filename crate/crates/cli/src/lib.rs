//! Experiment configuration and stage orchestration behind the `meg`
//! binary. The library half exists so integration tests can drive the
//! pipeline in-process; the binary adds argument parsing on top.

pub mod config;
pub mod stages;
