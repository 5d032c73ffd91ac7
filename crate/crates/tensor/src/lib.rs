//! Minimal dense tensor engine: NCHW tensors, im2col convolutions, a
//! reverse-mode tape, parameter storage and Adam.
//!
//! Kernels are data-parallel over independent work items through rayon when
//! the `parallel` feature is enabled and fall back to plain loops otherwise.

pub mod exec;
pub mod graph;
pub mod kernels;
mod optim;
mod scalar;
mod tensor;

pub use graph::{Binding, CustomOp, Gradients, Graph, Var};
pub use kernels::ConvSpec;
pub use optim::{clip_global_norm, global_norm, Adam, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
