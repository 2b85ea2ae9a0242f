// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense tensors with reverse-mode automatic differentiation.

mod float;
mod tape;
mod tensor;

pub use float::{DType, Float};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
