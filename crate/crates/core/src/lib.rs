//! Post-training quantization for a from-scratch toy vision transformer:
//! per-patch outlier-aware activation quantization, a shifted log2 quantizer
//! for post-GELU activations, and module-wise reconstruction with an
//! attention-distribution loss.

pub mod audit;
pub mod autodiff;
pub mod calib;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod quant;
pub mod recon;
pub mod rng;
pub mod serde_ext;
pub mod storage;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
