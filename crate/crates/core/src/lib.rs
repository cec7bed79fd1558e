//! Toy text-conditioned diffusion with cross-attention capture and control.
//!
//! The denoiser exposes every cross-attention map through a hook, which the
//! [`controller`] uses to inject, align and re-weight maps between a source
//! and an edited generation run in lockstep.

pub mod checkpoint;
pub mod controller;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod image_io;
pub mod mask;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
