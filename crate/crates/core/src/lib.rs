//! Two-stage solubility screening: locate the glass vial in a camera frame,
//! crop it, and classify the contents as dissolved or undissolved.
//!
//! The crate also carries the experiment harness used to train and assess
//! the classifier (k-fold cross-validation with early stopping) and a
//! procedural vial-image generator that provides ground truth for tests.

pub mod classifier;
pub mod dataset;
mod error;
pub mod image;
pub mod metrics;
pub mod preprocess;
pub mod rng;
pub mod screening;
pub mod segmentation;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImageRgb;
pub use metrics::{PredictionRecord, SolubilityLabel};
