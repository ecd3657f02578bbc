//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Everything here is generic over [`Scalar`], so the engine runs on `f32`
//! or `f64`. The rest of the crate instantiates it at `f64` through the
//! aliases exported from the crate root.

mod adam;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use adam::{Adam, AdamConfig};
pub use params::{ParamId, ParamSet};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

/// Floating-point element type of a [`Tensor`].
///
/// Implemented automatically for every type satisfying the bounds.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` constant.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
}
