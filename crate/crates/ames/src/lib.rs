//! Descriptor stores, file formats and the command-line pipeline around
//! `ames-core`.

pub mod cli;
pub mod error;
pub mod exec;
pub mod format;
pub mod pipeline;
pub mod store;
pub mod tables;

pub use error::{Error, Result};
