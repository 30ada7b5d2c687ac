//! Experiment harness for the time-step few-shot learner: configs, the
//! shared pipeline, CLI commands and result tables.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod results;
