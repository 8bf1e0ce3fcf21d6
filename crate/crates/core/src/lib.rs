//! Logical query answering over multi-view knowledge graphs.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod kg;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod protocol;
pub mod query;
pub mod train;

pub use error::{Error, Result};
