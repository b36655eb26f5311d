//! Dynamic facial identity embeddings: landmark-distance features, a dilated
//! temporal network trained with a pull/push contrastive loss, and ROC-based
//! verification of who drove a synthetic talking-head video.

pub mod data;
pub mod engine;
pub mod error;
pub mod features;
mod io_util;
pub mod loss;
pub mod network;
pub mod sampler;
pub mod synth;
pub mod trainer;
pub mod eval;
pub mod cli;

pub use error::{Error, Result};
