//! Dense tensors, a reverse-mode tape and the attention primitives the
//! backbone is built from.

mod gradcheck;
pub mod kernels;
mod layers;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use layers::{mhsa, AttentionWeights, LinearVars, LoraVars};
pub use tape::{cosine, Gradients, SetLayout, Tape, Var, MASK_BIAS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
