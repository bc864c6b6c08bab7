//! Experiment runner for multi-teacher distillation with learned teacher
//! selection.

pub mod config;
pub mod plot;
pub mod report;
pub mod runner;
pub mod stats;
