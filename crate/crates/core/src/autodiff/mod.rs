//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied during the forward pass;
//! [`Tape::backward`] sweeps it in reverse and returns per-node gradients.
//! Learnable tensors live in a [`ParamStore`] outside the tape and receive
//! their gradients through [`ParamStore::accumulate`], after which
//! [`AdamState::step`] updates them.
//!
//! The engine is generic over [`Real`]: models train in `f32`, and the same
//! code instantiated at `f64` serves as the shadow mode for gradient checks.

mod adam;
pub mod conv;
#[cfg(any(test, feature = "gradcheck"))]
pub mod gradcheck;
pub mod layers;
mod param;
mod real;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use conv::Geom;
pub use param::{Group, Param, ParamId, ParamStore};
pub use real::Real;
pub use tape::{softmax_in_place, Grads, Tape, Var};
pub use tensor::Tensor;
