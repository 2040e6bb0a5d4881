//! Probabilistic prototype calibration for generalized few-shot semantic
//! segmentation.

pub mod data;
pub mod decoder;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod incremental;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod probabilistic;
pub mod prototypes;
pub mod taskgen;
pub mod training;

pub use error::{Error, Result};
