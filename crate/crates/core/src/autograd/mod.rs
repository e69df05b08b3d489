//! Dense tensors, define-by-run reverse-mode differentiation and Adam.

mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

#[cfg(test)]
mod tests;

pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use tape::{gelu_scalar, Gradients, Tape, Var};
pub use tensor::Tensor;
