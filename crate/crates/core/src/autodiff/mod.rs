//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod optim;
mod tape;
mod tensor;

pub use optim::{adamw_step, AdamW, AdamWConfig, Moments};
pub use tape::{Gradients, Tape, Var, DIV_GUARD};
pub use tensor::Tensor;
