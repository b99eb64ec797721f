//! File formats, configuration and the staged command pipeline around
//! `dclr-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dten;
pub mod error;
pub mod executor;
pub mod manifest;
pub mod png_io;

pub use commands::Run;
pub use config::RunConfig;
pub use error::{Error, Result};
