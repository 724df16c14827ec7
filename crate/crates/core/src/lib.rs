//! Structured filter pruning driven by a multitask pruner network.
//!
//! A pruner network shares the trunk architecture of the target CNN and
//! emits, for every convolutional layer, a vector of near-binary channel
//! weights. The target network's feature maps are scaled by these weights
//! while both networks are trained with an ℓ1 penalty on the weights.
//! Channels whose weights collapse to zero are then physically removed.
//!
//! Module map:
//! - [`autodiff`]: tensors on a reverse-mode tape and the layer operations.
//! - [`model`]: network specs, parameters, main/pruner networks, mask groups.
//! - [`trainer`]: the alternating pruning loop, pretraining and finetuning.
//! - [`rewriter`]: keep plans and physical removal of filters.
//! - [`analyzer`]: FLOPs/parameter accounting and CPU timing.
//! - [`data`]: CIFAR/IDX loaders, augmentation and checkpoints.

pub mod analyzer;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod rewriter;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, PoolKind, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
