//! camkit: saliency-map interpretability for convolutional image classifiers,
//! self-contained on a micro CNN engine.
//!
//! The crate provides:
//!
//! - [`nn`]: a small CPU inference/training engine with reverse-mode
//!   gradients with respect to any convolutional layer's activations;
//! - [`cam`]: the activation-based saliency family (CAM, Grad-CAM,
//!   Grad-CAM++, smoothed Grad-CAM++);
//! - [`perturb`]: edge-feature descriptors and feature-enhanced input blends;
//! - [`feature_cam`]: combinations of perturbed inputs with saliency maps;
//! - [`explain`]: explanation-map construction and classifier-side
//!   evaluation metrics;
//! - [`checkpoint`], [`fmap`], [`dataset`], [`imageio`]: file formats and I/O.
//!
//! Everything stochastic takes an explicit 64-bit seed and draws from the
//! SplitMix64 generator documented in [`rng`]; fixed seeds give bit-identical
//! results.

pub mod cam;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod explain;
pub mod feature_cam;
pub mod fmap;
pub mod imageio;
pub mod nn;
pub mod perturb;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
