//! Dense-tensor numerics: reverse-mode autodiff over a small op set, Adam,
//! finite-difference gradient checking, and checkpoint serialization.

mod adam;
mod checkpoint;
mod gradcheck;
pub(crate) mod graph;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamError};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use graph::{Graph, NodeId, RowSrc};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{dot, Tensor};

use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point element type for tensors, graphs, and parameters.
///
/// `f32` is the training type; `f64` backs the finite-difference gradient
/// checks, which need the extra mantissa to resolve a 1e-5 central step.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}
