//! Floating point scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, NumAssignOps, ToPrimitive};

/// f32 or f64.
///
/// Everything numeric in this crate (geometry, codec, diffusion kernels,
/// adapters, the denoiser and its backward pass) is written against this
/// trait. Training runs in `f32`; gradient checks run in `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Spacing of the grid on which `2x - 1` and `(z + 1) / 2` are exact
    /// for every grid point in `[0, 1]` (resp. `[-1, 1]`).
    fn unit_grid() -> Self {
        Self::epsilon() / Self::lit(2.0)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Snap `x` to the nearest multiple of [`Scalar::unit_grid`].
pub fn snap_to_unit_grid<T: Scalar>(x: T) -> T {
    let g = T::unit_grid();
    (x / g).round() * g
}
