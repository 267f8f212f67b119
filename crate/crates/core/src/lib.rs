//! GPT-style language models with skip-layer attention: a subset of heads in
//! upper layers attends over keys and values produced a fixed number of
//! layers earlier.

pub mod check;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod sla;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
