//! Fully Transformer Network for semantic segmentation.
//!
//! The crate builds up in layers:
//!
//! - [`tensor`] / [`tape`] / [`ops`]: dense tensors with reverse-mode
//!   autodiff on a recorded operation tape, plus [`gradcheck`] as the
//!   independent finite-difference oracle.
//! - [`attention`]: grid-grouped multi-head self-attention, its global
//!   special case, spatial-reduction attention and conditional position
//!   encoding.
//! - [`encoder`]: the four-stage pyramid group transformer.
//! - [`decoder`]: the feature pyramid transformer producing stride-4
//!   fused features and segmentation logits.
//! - [`model`] / [`train`] / [`data`]: end-to-end assembly, losses, the
//!   toy training loop and its synthetic dataset.
//! - [`analysis`]: analytic parameter/MAC accounting and the variant
//!   derivation search.
//! - [`io`] / [`checkpoint`]: binary tensor files, PPM/PGM images, and
//!   bit-exact checkpoints.
//!
//! All numeric code is generic over [`scalar::Scalar`]; f32 is the
//! working precision of the artifact, f64 backs the oracles.

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod io;
mod kernels;
pub mod model;
pub mod nn;
pub mod ops;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working-precision aliases.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = tape::Tape<f32>;
pub type FtnModel32 = model::FtnModel<f32>;

/// Oracle-precision aliases.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = tape::Tape<f64>;
pub type FtnModel64 = model::FtnModel<f64>;
