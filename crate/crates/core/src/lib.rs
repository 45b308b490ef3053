//! Toy identity-conditioned latent video diffusion.
//!
//! A small diffusion transformer over space-to-channel video latents,
//! conditioned on a prompt and a reference image through a Q-Former fusion
//! module, with a timestep-aware identity resampler injected into every
//! block and an optional motion-weighted training loss. Everything runs on
//! the CPU on a tape-based autograd generic over `f32`/`f64`.

pub mod aml;
pub mod autograd;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod identity;
pub mod image;
pub mod latent;
pub mod mif;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod synthdata;
pub mod taii;
pub mod tensor;
pub mod train;

pub use autograd::{Grads, Tape, Var};
pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Sample32 = synthdata::TrainingSample<f32>;
pub type Sample64 = synthdata::TrainingSample<f64>;
