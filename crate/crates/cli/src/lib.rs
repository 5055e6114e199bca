//! Library side of the `dfgp` binary: the run configuration, the
//! subcommands and the output manifest.

pub mod commands;
pub mod config;
pub mod manifest;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod cli_guide {}
