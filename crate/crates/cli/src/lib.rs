//! Command-line orchestration for the avflow engine.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use error::{CliError, Result};
