//! Reverse-mode automatic differentiation on an eager tape.
//!
//! The backward pass emits ordinary tape operations, so gradients are
//! themselves differentiable graph nodes. That property is what makes the
//! gradient-penalty objective trainable: the penalty is a function of an
//! input gradient, and optimizing it requires differentiating through the
//! backward pass a second time.

pub mod conv;
pub mod gradcheck;
pub mod tape;

pub use tape::{Scalar, Tape, Var};
