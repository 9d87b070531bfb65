//! Minimal dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a plain shaped buffer. Differentiable computations are
//! recorded on a [`Tape`], which hands out [`Var`] handles; learnable weights
//! live in a [`ParamStore`] and are bound to a tape with [`Tape::param`].
//! After [`Tape::backward`], gradients of leaves are available on the tape
//! and can be folded into the store with [`ParamStore::accumulate`].
//!
//! Every kernel is generic over [`Element`]; production code runs in `f32`
//! and the finite-difference suites instantiate the same code in `f64`.

mod adam;
pub mod checkpoint;
mod element;
mod error;
pub mod gradcheck;
mod kernels;
mod param;
mod tape;
mod tensor;

pub use adam::Adam;
pub use element::Element;
pub use error::{Result, TensorError};
pub use kernels::{conv_output_extent, conv_transpose_output_extent};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{ConvSpec, GatherTable, ReduceKind, Tape, Var, GROUP_NORM_EPS};
pub use tensor::Tensor;
