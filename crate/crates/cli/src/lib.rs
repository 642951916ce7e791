//! Command implementations behind the `lvgan` binary, and the HTTP API.

pub mod commands;
pub mod error;
pub mod png;
pub mod serve;

pub use error::{CliError, CliResult};
