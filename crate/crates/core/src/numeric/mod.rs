//! Dense matrix kernels, reverse-mode differentiation and the tensor container.

pub mod container;
pub mod matrix;
pub mod tape;

pub use container::{Container, Tensor};
pub use matrix::{dot, layer_norm, sigmoid, softmax_in_place, Matrix, Real, LAYER_NORM_EPS};
pub use tape::{Gradients, OpKind, Tape, Var};
