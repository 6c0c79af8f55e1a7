//! Library side of the `relia` command-line tool.

pub mod commands;
pub mod config;
