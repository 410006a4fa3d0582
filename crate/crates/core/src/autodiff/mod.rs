//! Dense `f32` tensors, a define-by-run reverse-mode tape and AdamW.

pub(crate) mod kernels;
mod optim;
mod tape;
mod tensor;

pub use kernels::{gelu, gelu_grad};
pub use optim::{adamw_step, AdamWState};
pub use tape::{Gradients, OpRecord, Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};
