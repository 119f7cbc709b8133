//! Scalar abstractions shared by the numeric kernels.
//!
//! Geometry, kinematics, beam/recoil physics, metrics and density estimation
//! are written against [`Real`] so they run in `f32` or `f64`. Shapley
//! enumeration only needs field arithmetic and is written against
//! [`Scalar`], which also admits exact rationals.

use std::fmt::Debug;

use num_traits::{Float, FloatConst, FromPrimitive, Num, ToPrimitive};

/// Field-like scalar: enough arithmetic for weighted sums and means.
pub trait Scalar: Clone + Debug + PartialOrd + Num + FromPrimitive + Send + Sync + 'static {}

impl<T> Scalar for T where T: Clone + Debug + PartialOrd + Num + FromPrimitive + Send + Sync + 'static {}

/// Floating-point scalar: `f32` or `f64`.
pub trait Real:
    Scalar + Float + FloatConst + ToPrimitive + Copy + Default + std::iter::Sum + std::fmt::Display
{
    /// Converts an `f64` literal into this type.
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("f64 literal representable")
    }

    /// Converts a count into this type.
    fn count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Relative closeness with an absolute floor of `tol` near zero.
pub fn rel_close<T: Real>(a: T, b: T, tol: T) -> bool {
    let scale = a.abs().max(b.abs()).max(T::one());
    (a - b).abs() <= tol * scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lit_roundtrips_in_both_widths() {
        assert_eq!(<f64 as Real>::lit(0.5), 0.5);
        assert_eq!(<f32 as Real>::lit(0.5), 0.5f32);
        assert_eq!(<f64 as Real>::count(7), 7.0);
    }

    #[test]
    fn rel_close_uses_unit_floor() {
        assert!(rel_close(1e-13_f64, 0.0, 1e-12));
        assert!(!rel_close(1.0_f64, 1.1, 1e-3));
    }
}
