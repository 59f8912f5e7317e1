//! Library half of the CLI: command implementations, configuration layers,
//! image file I/O, and the coarse-to-fine grid search.

pub mod commands;
pub mod config;
pub mod gridsearch;
pub mod imgio;
pub mod ops;
