//! Core library for an RGB + thermal-infrared object tracker.
//!
//! The model is a pair of convolutional streams (one per modality) joined by
//! attribute-specific fusion branches and an attention-based aggregation
//! module, followed by a small fully connected classification head. Training
//! happens in two phases (per-attribute branches first, then aggregation);
//! tracking runs online with Gaussian candidate sampling and periodic
//! fine-tuning of the head.
//!
//! Everything runs on the CPU in `f64`. Backward passes are written by hand
//! and verified against central finite differences in the test suite.

pub mod backbone;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod geometry;
pub mod head;
pub mod model;
pub mod gradcheck;
pub mod params;
pub mod plot;
pub mod tensor;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};
pub use geometry::BoundingBox;
