//! Scene-text question answering with spatially aware self-attention.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tokenstream;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
