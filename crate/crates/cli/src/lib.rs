//! Experiment runner behind the `kvbabel` binary.

pub mod commands;
pub mod config;
pub mod report;
pub mod run;
