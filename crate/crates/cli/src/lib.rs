//! Experiment runner behind the `lab` binary: configuration, pretraining,
//! one-shot adaptation, sweeps over perturbation matrices, theory reports and
//! summary tables.

pub mod commands;
pub mod config;
pub mod demo;
pub mod error;
pub mod report;
pub mod sweep;
