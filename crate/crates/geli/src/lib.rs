//! File formats, the HTTP oracle and the `geli` command-line pipeline.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod oracle;

pub use error::{Error, Result};
