//! File formats, configuration and subcommands for the `gail` binary.
//!
//! The numerics live in `gail-core`; this crate reads MDPs, feature maps and
//! checkpoints from TOML, demonstrations from CSV, and writes every output
//! atomically so two runs with the same config and seed produce identical
//! bytes.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result};
