//! Self-accumulative transformer for multi-region ordinal grading.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Result, SatError};
