//! Scalar abstraction: every numeric kernel in this crate is generic over a
//! floating-point type. `f32` and `f64` are the supported instantiations;
//! the crate root exports `f64` aliases, which the CLI uses throughout.

use std::fmt::{Debug, Display};
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + FromStr<Err = std::num::ParseFloatError>
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Convert a constant. Panics on non-representable input, which cannot
    /// happen for finite `f64` into `f32`/`f64`.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant converts")
    }

    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// One standard-normal deviate from `rng`.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Real for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Real for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}
