//! Differential testing toolkit for small convolutional classifiers.
//!
//! The pipeline: train three LeNet-style models on one dataset, then run
//! gradient ascent on seed images against a joint objective (cross-model
//! disagreement plus neuron coverage), constrained to realistic image
//! transformations. Inputs on which the models disagree are registered as
//! corner cases, and the corpus feeds an augmenting retraining step that
//! measures the robustness gain.

pub mod augment;
pub mod coverage;
pub mod config;
pub mod dataset;
pub mod error;
pub mod generator;
pub mod layers;
pub mod model;
pub mod seeds;
pub mod sweep;
pub mod tensor;
pub mod transforms;
pub mod weights;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::Tensor;
