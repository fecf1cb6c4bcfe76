//! Command implementations behind the `metasaea` binary.

pub mod commands;
pub mod config;
pub mod output;

pub use config::{Precision, RunConfig};
