//! Self-ablating transformers.
//!
//! A miniature GPT-Neo-style decoder trained with k-winners-take-all gates on
//! attention heads and MLP neurons. The gates act only on an ablated copy of
//! the residual stream during training; the exported model is a plain
//! transformer. The crate also carries the evaluation battery used to study
//! the trained models: perplexity, L1 sparsity, sparse autoencoders and
//! activation-patching circuit discovery on an indirect-object task.

// `!(x > 0.0)` is the NaN-rejecting form; tape ops are methods on `Var`.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod analysis;
pub mod container;
pub mod data;
pub mod error;
pub mod kernels;
pub mod kwta;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{AblationMode, Checkpoint, Model, ModelConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Float, Tensor};
