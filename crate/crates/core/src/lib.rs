//! Training and inference engine for compact convolutional transformer
//! image classifiers (ViT-Lite / CVT / CCT families), self-contained on CPU.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`] / [`ops`]: a dense tensor type with reverse-mode
//!   autodiff and the differentiable kernels (matmul, conv2d, maxpool2d,
//!   softmax, layernorm, activations).
//! - [`gradcheck`]: the finite-difference oracle every kernel is held to.
//! - [`layers`]: linear, dropout, stochastic depth, multi-head attention and
//!   the pre-norm encoder block.
//! - [`tokenizer`]: patch and convolutional image-to-sequence front ends.
//! - [`model`]: family registry, full classifiers, parameter/MAC accounting.
//! - [`optim`]: AdamW, warmup + cosine schedule, label-smoothed CE.
//! - [`data`]: MNIST/Fashion-MNIST (IDX) and CIFAR-10/100 (binary) loaders,
//!   augmentation and batching.
//!
//! Kernels parallelize over independent output regions with rayon (feature
//! `parallel`, on by default, with a sequential fallback) while keeping the
//! per-element reduction order fixed, so results do not depend on the worker
//! count.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod model;
pub mod ops;
pub mod optim;
pub mod parallel;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{no_grad, Tensor};
