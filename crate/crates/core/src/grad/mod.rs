//! Reverse-mode autodiff engine: tensors, a Wengert tape over conv-net
//! primitives, numerical gradient checking, and Adam.

pub mod adam;
pub mod check;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use tape::{BnBatch, GradError, GradStore, ReluMode, Tape, Var};
pub use tensor::Tensor;
