//! Saliency-guided active learning.
//!
//! Trains small CAM-compatible image classifiers with a loss that mixes
//! cross-entropy and agreement between the model's class activation map and
//! a binary saliency mask. An active-learning loop queries labels (and,
//! until a budget change point, human masks) and afterwards lets an
//! interpretability-tuned auxiliary model supply the masks.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the type
//! aliases below fix the common choices.

pub mod annotation;
pub mod data;
mod error;
pub mod experiment;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod probe;
mod scalar;
pub mod strategy;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision network, the training default.
pub type Network32 = nn::Network<f32>;
/// Double-precision network, used by gradient and oracle checks.
pub type Network64 = nn::Network<f64>;
pub type SaliencyMap32 = probe::SaliencyMap<f32>;
pub type SaliencyMap64 = probe::SaliencyMap<f64>;
