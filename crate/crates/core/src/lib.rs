//! A small from-scratch neural network library built around the spinal layer.
//!
//! * [`autodiff`]: define-by-run reverse-mode differentiation over [`Tensor`]s.
//! * [`layers`]: linear, conv2d, max-pooling, flatten and dropout.
//! * [`spinal`]: the gradual-input spinal layer and the constructive
//!   equivalence with single-hidden-layer networks.
//! * [`model`]: textual model specs and sequential models built from them.
//! * [`costing`]: exact parameter, multiplication and activation counts.
//! * [`data`]: IDX loading, synthetic regression data, batching.
//! * [`train`]: losses, SGD/Adam and the training loop.

pub mod autodiff;
pub mod costing;
pub mod data;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod layers;
pub mod model;
pub mod seed;
pub mod spinal;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{LayerSpec, Model, ModelSpec};
pub use spinal::{SpinalConfig, SpinalLayer};
pub use tensor::Tensor;
