//! Miniature text-conditioned diffusion customization: a patch-transformer
//! denoiser tuned through two LoRA branches (object and physics) under a
//! diffusion loss, an isometric regularizer on the text encoder, and a
//! gradient-orthogonality regularizer between the branches.
//!
//! Numerical code is generic over [`Scalar`] (`f32` and `f64`); models train
//! in `f32` and the aliases below name the concrete types used at runtime.

pub mod checkpoint;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evalbench;
pub mod io;
pub mod lora;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Runtime tensor type.
pub type DiffTensor = tensor::Tensor<f32>;
pub type Params = tensor::ParamStore<f32>;
pub type Graph32 = tensor::Graph<f32>;
/// Double-precision graph used by finite-difference checks.
pub type Graph64 = tensor::Graph<f64>;
