//! Library surface of the CLI crate: configuration, output emission and the
//! subcommand implementations, shared between the `vortexline` binary and the
//! acceptance suite.

pub mod commands;
pub mod config;
pub mod output;
