//! File formats, run bookkeeping and the `ttl` command line over `ttl-core`.

pub mod cli;
pub mod codec;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod formats;
pub mod manifest;
pub mod runtime;
pub mod svg;

pub use error::{Error, Result};
