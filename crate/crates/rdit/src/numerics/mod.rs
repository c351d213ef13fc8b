//! Deterministic numerical primitives with analytic gradients.

pub mod ops;
pub mod tape;
pub mod tensor;

pub use ops::{attention, lora_apply, rmsnorm, silu, softmax, LoraParams};
pub use tape::{grad_check, Grads, Tape, Var};
pub use tensor::{cast, Element, Tensor};
