//! Library surface of the experiment driver: configuration, benchmark
//! assembly, and the command implementations used by the `ttrf` binary and
//! the acceptance suite.

pub mod commands;
pub mod config;
pub mod experiment;
