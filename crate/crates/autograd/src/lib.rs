//! Reverse-mode autodiff over dense tensors, generic over the scalar type.
//!
//! The engine is a flat tape: every operation appends a node holding its
//! value and a boxed backward rule. Gradients are propagated by walking the
//! tape in reverse. Ops are deterministic, including their rayon-parallel
//! paths, so repeated runs with the same inputs are bit-identical.

pub mod conv;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use tape::{BackwardOp, Tape, Var};
pub use tensor::Tensor;

/// Scalar type the whole stack is generic over: f32 for speed, f64 for
/// gradient checks and tight-tolerance oracles.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough round trip used for checkpoint serialization.
    fn as_f64(self) -> f64;
    fn from_f64_lossy(x: f64) -> Self;
}

impl Real for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f64_lossy(x: f64) -> Self {
        x
    }
}

/// Shorthand for `T::from_f64_lossy` on literals.
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64_lossy(x)
}

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
