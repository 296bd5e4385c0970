//! Command-line front end: configuration, file formats and the subcommands.

pub mod commands;
pub mod config;
pub mod formats;
pub mod verify;
