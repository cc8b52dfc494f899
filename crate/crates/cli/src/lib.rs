//! `ecnn`: train, prune, rebuild, switch, evaluate and profile elastic CNNs
//! stored in single-file checkpoints.

pub mod checkpoint;
mod commands;

pub use commands::{exit_code, run, Cli, Command};
