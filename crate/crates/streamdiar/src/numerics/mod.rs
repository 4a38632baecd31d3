//! Deterministic differentiable-tensor core: dense f64 tensors, the
//! primitives the model needs, reverse-mode gradients, and finite-difference
//! gradient checking.

pub mod autodiff;
pub mod params;
pub mod tensor;

pub use autodiff::{grad_check, Tape, Var};
pub use params::Params;
pub use tensor::{ConvKind, ConvSpec, Tensor};
