//! Floating point abstraction shared by the score, latency and toy-layer math.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_rational::Ratio;
use num_traits::Float;

/// Floating point type usable for gate scores and latency arithmetic.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of_f64(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;

    fn of_count(n: u64) -> Self {
        Self::of_f64(n as f64)
    }

    fn of_ratio(r: Ratio<u64>) -> Self {
        Self::of_count(*r.numer()) / Self::of_count(*r.denom())
    }
}

macro_rules! impl_scalar {
    ($f:ty) => {
        impl Scalar for $f {
            #[inline]
            fn of_f64(x: f64) -> Self {
                x as $f
            }

            #[inline]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);
