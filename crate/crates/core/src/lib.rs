//! Unsupervised fingerphoto presentation-attack detection at desk scale.
//!
//! A diffusion model is trained on bona fide fingerphoto textures only.
//! Test images are partially diffused and denoised back; the perceptual
//! distance between input and reconstruction is the anomaly score, and
//! detection is evaluated with ISO/IEC 30107-3 error rates.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod harness;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod similarity;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
