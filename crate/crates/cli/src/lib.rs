//! Command-line tool and HTTP service for mlaqp catalogues.

pub mod cli;
pub mod config;
pub mod monitor;
pub mod repl;
pub mod server;
