//! Parallel runner, file formats and command-line front-end for
//! [`echo4_core`].

pub mod cli;
pub mod config;
pub mod error;
pub mod levels;
pub mod output;
pub mod pipeline;
pub mod runner;
pub mod spectrum;

pub use error::{CliError, Result};
