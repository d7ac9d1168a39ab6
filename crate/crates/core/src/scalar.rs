//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar used for intensities, coordinates and probabilities: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal; infallible for both supported floats.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite float converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts a 3-vector of `f64` into `T`.
#[inline]
pub fn vec3<T: Real>(v: [f64; 3]) -> [T; 3] {
    [T::lit(v[0]), T::lit(v[1]), T::lit(v[2])]
}

#[inline]
pub fn vec3_f64<T: Real>(v: [T; 3]) -> [f64; 3] {
    [v[0].as_f64(), v[1].as_f64(), v[2].as_f64()]
}
