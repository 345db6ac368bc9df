//! Scalar abstraction: every algorithm in this crate is generic over the
//! floating-point type so the same code path can run in `f32` (production)
//! and `f64` (finite-difference gradient checks).

/// Floating-point scalar used throughout the crate.
///
/// `nalgebra::RealField` supplies the transcendental functions and linear
/// algebra bounds; the `num-traits` casts bridge to literals and file I/O.
pub trait Float:
    nalgebra::RealField
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Copy
    + Default
    + std::iter::Sum
{
    fn from_cfg(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }
    fn to_f64_cfg(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Float for f32 {}
impl Float for f64 {}

/// Shorthand for converting an `f64` constant into the working scalar type.
#[inline]
pub fn cast<T: Float>(x: f64) -> T {
    T::from_cfg(x)
}
