//! Diffusion-based test-time adaptation with structural guidance.
//!
//! Out-of-distribution samples are partially noised with a diffusion
//! forward process and then denoised by a reverse sampler whose every step
//! is nudged by the input-gradient of a composite objective: the entropy of
//! the classifier's prediction averaged over augmented views, a style term
//! pulling an embedding toward a source prototype, and a patch-wise
//! contrastive content term. A confidence filter keeps the adapted sample
//! only when it lowers the classifier's predictive entropy.

pub mod autograd;
pub mod container;
pub mod imgops;
pub mod error;
pub mod guidance;
pub mod nets;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod shiftgen;
pub mod tensor;

pub use error::{GdaError, Result};
pub use tensor::{Real, SampleTensor, Tensor};
