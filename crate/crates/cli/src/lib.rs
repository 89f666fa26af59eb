//! Experiment plumbing behind the `harl` binary.
pub mod config;
pub mod repro;
pub mod train;
