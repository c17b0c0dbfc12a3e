//! Configuration-driven experiments for errors-in-variables regression.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod suites;

pub use error::CliError;
