//! Dense feature-calibration and channel-attention network for iris
//! presentation attack detection, built from scratch on a small tensor and
//! autograd core.
//!
//! Layout of the crate, bottom up:
//!
//! - [`tensor`]: dense tensors, compute kernels and the define-by-run graph.
//! - [`nn`]: parameter storage, layers, losses and the Adam optimizer.
//! - [`model`]: FC-Conv, FC-Block, the IFCNet pyramid, channel attention,
//!   the mini-dense backbone, the full network and checkpoints.
//! - [`data`]: manifests, image decoding, augmentation, protocol splits and
//!   the synthetic iris generator.
//! - [`train`]: training, fine-tuning, metrics and the protocol runner.
//! - [`gradcheck`]: finite-difference verification of every layer.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Graph, Scalar, Tensor, Var};
