//! Spoof-cue learning for face presentation attack detection.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod generator;
pub mod image_tensor;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod scoring;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
