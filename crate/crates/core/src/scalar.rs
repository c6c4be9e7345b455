//! Scalar abstraction shared by every numerical module.
//!
//! All math is written against [`Real`], which `f32` and `f64` implement.
//! Persistence and the training pipeline use `f64`; the type aliases at the
//! crate root name the common instantiations.

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Never fails for finite input.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize fits in a float")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Draws one standard normal variate.
///
/// The draw is always made in `f64` and then narrowed, so an `f32` run sees
/// the same underlying stream as an `f64` run with the same seed.
#[inline]
pub fn std_normal<S: Real, R: Rng + ?Sized>(rng: &mut R) -> S {
    let z: f64 = StandardNormal.sample(rng);
    S::lit(z)
}

/// Uniform draw on `[0, 1)`.
#[inline]
pub fn uniform01<S: Real, R: Rng + ?Sized>(rng: &mut R) -> S {
    S::lit(rng.random::<f64>())
}

/// Euclidean norm of `a - b` with optional weight on the squared sum.
#[inline]
pub(crate) fn weighted_dist<S: Real>(a: &[S], b: &[S], weight: S) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc += d * d;
    }
    (acc * weight).sqrt()
}
