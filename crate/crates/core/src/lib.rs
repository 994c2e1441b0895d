//! Accuracy-preserving confidence calibration.
//!
//! A frozen classifier's logits become the location of a Concrete distribution on
//! the probability simplex, and a small branch on the classifier's hidden features
//! supplies an input-dependent temperature. Predictions stay `argmax` of the logits,
//! so calibration cannot change accuracy.
//!
//! The temperature branch is trained on Multi-Mixup pairs ([`mixup`]), whose labels
//! lie strictly inside the simplex.

pub mod calibrate;
pub mod data;
pub mod distributions;
mod error;
pub mod metrics;
pub mod mixup;
pub mod models;
pub mod numcore;

pub use error::{Error, Result};
