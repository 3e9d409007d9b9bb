//! Kernel-guided single-image rain streak removal.
//!
//! Rain streaks are modeled as a raindrop mask convolved with a motion blur
//! kernel `K(theta, l)` and added to the luminance channel of a clean image.
//! A small parameter network regresses `(theta, l)` from the texture component
//! of a rainy patch, the estimated kernel is PCA-projected and stretched into
//! spatial degradation maps, and a residual derain network predicts the streak
//! layer guided by those maps. Subtracting the predicted streaks recovers the
//! clean image.

pub mod cli;
pub mod decompose;
pub mod error;
pub mod imgcore;
pub mod kernelspace;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod rainsim;

pub use error::{Error, Result};
