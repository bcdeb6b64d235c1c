//! Command-line driver: configuration, file formats, synthetic data and the
//! subcommands behind the `batr` binary.

pub mod commands;
pub mod config;
pub mod formats;
pub mod synth;

pub use config::Config;
