//! Desk-scale video-inpainting toolkit: a small dense-tensor library with
//! reverse-mode differentiation, a four-attention motion block, latent
//! diffusion training and DDIM sampling, instance-aware mask selection,
//! task-vector checkpoint merging, and evaluation metrics.

pub mod attention;
pub mod autodiff;
pub mod ckpt;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod reference;
pub mod region;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{scaled_dot_attention, ResizeMode, Scalar, Tensor};
