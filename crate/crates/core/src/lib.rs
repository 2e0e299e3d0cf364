//! Two-stage multi-task learning for recommendation: adversarially
//! disentangled multi-task pre-training followed by frozen, prompt-tuned
//! adaptation to new tasks.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod model;
pub mod pretrain;
pub mod prompt;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
