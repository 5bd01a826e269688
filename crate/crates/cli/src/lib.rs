//! The `kgsel` command line and HTTP service.

mod commands;
pub mod config;
pub mod server;

pub use commands::{run, run_cli, Cli};
