//! Guided local-entropy keypoint detection: geometry, grid correspondences,
//! entropy losses, a small trainable detector, inference and evaluation.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for common uses.

pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod grid;
pub mod inference;
pub mod losses;
pub mod map;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use geometry::Homography;
pub use map::{DenseMap, Image, ScoreMap, WeightMap};
pub use scalar::Scalar;

pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
pub type ScoreMap32 = ScoreMap<f32>;
pub type ScoreMap64 = ScoreMap<f64>;
pub type Detector32 = model::Detector<f32>;
pub type Detector64 = model::Detector<f64>;
