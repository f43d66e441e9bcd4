//! Scalar abstraction: the numerical core is generic over the floating-point
//! type. `f64` is the production choice; `f32` instantiates for cheap smoke
//! coverage and memory-constrained experiments.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};
use rustfft::FftNum;

/// Floating-point scalar usable everywhere in the crate: f32 or f64.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + NumAssign
    + FftNum
    + Sum
    + Display
    + LowerExp
    + Debug
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Complex number over the crate scalar.
pub type Cplx<T> = Complex<T>;

/// Cast an f64 literal/constant into the generic scalar.
#[inline]
pub fn real<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("constant not representable in scalar type")
}

/// Vacuum permittivity, F/m (CODATA 2018).
pub const EPS0_F64: f64 = 8.854_187_812_8e-12;
/// Vacuum permeability, H/m (CODATA 2018).
pub const MU0_F64: f64 = 1.256_637_062_12e-6;
/// Speed of light in vacuum, m/s.
pub const C0_F64: f64 = 299_792_458.0;

#[inline]
pub fn eps0<T: Real>() -> T {
    real(EPS0_F64)
}

#[inline]
pub fn mu0<T: Real>() -> T {
    real(MU0_F64)
}

#[inline]
pub fn c0<T: Real>() -> T {
    real(C0_F64)
}

/// i (imaginary unit) as a complex scalar.
#[inline]
pub fn imag_unit<T: Real>() -> Cplx<T> {
    Cplx::new(T::zero(), T::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn casts_roundtrip() {
        let x: f64 = real::<f64>(0.25);
        assert_eq!(x, 0.25);
        let y: f32 = real::<f32>(0.5);
        assert_eq!(y, 0.5f32);
    }

    #[test]
    fn constants_physical() {
        // k0 = omega/c at 297.2 MHz, used in several fixtures.
        let k0 = 2.0 * std::f64::consts::PI * 297.2e6 / C0_F64;
        assert!((k0 - 6.229).abs() < 1e-2);
    }
}
