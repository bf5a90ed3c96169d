//! LM-Net: a lightweight multi-scale segmentation network built on a
//! self-contained dense-tensor core and reverse-mode autodiff.
//!
//! The crate provides:
//! - [`tensor`]: dense rank-N arrays (N,C,H,W layout), f32/f64
//! - [`autodiff`]: a dynamic tape plus the finite-difference gradient checker
//! - [`ops`]: convolution, batch/layer norm, pooling, resize, softmax kernels
//! - [`nn`]: layer parameter bundles and the multi-branch module
//! - [`reparam`]: conv+BN folding, branch merging, and cost counting
//! - [`attention`]: multi-head and local-window self-attention
//! - [`model`]: the full encoder / GFT / LFT / decoder network and weights IO
//! - [`metrics`]: segmentation metrics and the weighted cross-entropy loss
//! - [`data`]: dataset manifests, augmentation, and the synthetic generator
//! - [`train`]: AdamW with cosine annealing and the training loop

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod par;
pub mod reparam;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dtype, Element, Tensor};
