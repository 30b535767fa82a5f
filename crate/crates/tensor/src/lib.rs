//! Minimal dense-tensor engine with taped reverse-mode differentiation.
//!
//! Tensors are row-major; image-shaped tensors use `[batch, height, width,
//! channels]`. A [`Graph`] records ops eagerly and [`Graph::backward`] walks
//! the tape in reverse.

pub mod checkpoint;
mod error;
pub mod grad_check;
mod graph;
pub mod nn;
mod ops;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use grad_check::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use nn::{Bound, Conv2d, Linear, ParamSet, Parameter};
pub use ops::{concat, sigmoid};
pub use real::{DType, Real};
pub use tensor::Tensor;
