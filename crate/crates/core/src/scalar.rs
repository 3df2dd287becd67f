use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type used by the numerical core.
///
/// Everything in [`crate::mathkernel`], [`crate::encoder`] and
/// [`crate::objective`] is written against this trait so the same code runs
/// in `f64` (training, gradient checks) and `f32` (cheap inference).
pub trait Scalar:
    'static
    + Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Default
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + LowerExp
{
    /// Lossy conversion from an `f64` literal.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 representable in scalar type")
    }

    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
