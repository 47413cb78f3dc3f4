//! Dense-matrix arithmetic and the differentiable operations the model is
//! built from, with exact backward rules and a finite-difference verifier.

pub mod gradcheck;
pub mod matrix;
pub mod ops;
pub mod rng;
pub mod tape;

pub use matrix::{Matrix, Scalar};
pub use rng::Rng;
pub use tape::{Gradients, NodeId, OpTape, ParamId, ParamSet};
