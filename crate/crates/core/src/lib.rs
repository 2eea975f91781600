//! Counterfactual image explanations on a synthetic spurious-correlation
//! benchmark: train small vision models, steer inputs toward a target label
//! with a diffusion-regularized sign-gradient attack that penalizes spurious
//! feature drift, refine with mask-conditioned inpainting, and evaluate.

pub mod error;
pub mod nn;
pub mod rng;
pub mod tensor;

pub mod causal;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod refine;
pub mod steering;
pub mod synthspur;

pub use error::{Error, Result};
pub use tensor::ImageTensor;
