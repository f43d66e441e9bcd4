//! Free-space Helmholtz Green's function and the pointwise kernels derived
//! from it. Time convention e^{+i omega t}, so the outgoing scalar kernel is
//! g(r) = e^{-i k0 r} / (4 pi r).

use crate::error::{Error, Result};
use crate::scalar::{real, Cplx, Real};

/// Scalar Green's function g = e^{-i k0 r}/(4 pi r), r > 0.
pub fn scalar_green<T: Real>(r: T, k0: T) -> Result<Cplx<T>> {
    if !(r > T::zero()) {
        return Err(Error::Domain(
            "scalar_green requires r > 0; self-interactions use the self term".into(),
        ));
    }
    let four_pi = real::<T>(4.0) * T::PI();
    let mag = T::one() / (four_pi * r);
    let phase = -k0 * r;
    Ok(Cplx::new(phase.cos(), phase.sin()) * mag)
}

/// Radial derivative g'(r) = -(1/r + i k0) g(r).
#[inline]
fn green_radial_derivative<T: Real>(r: T, k0: T, g: Cplx<T>) -> Cplx<T> {
    -(Cplx::new(T::one() / r, k0)) * g
}

/// Gradient of g with respect to the observation point, for displacement
/// `dr` = observation - source: grad g = g'(r) * r_hat.
pub fn grad_green<T: Real>(dr: [T; 3], k0: T) -> Result<[Cplx<T>; 3]> {
    let r = norm3(dr);
    let g = scalar_green(r, k0)?;
    let gp = green_radial_derivative(r, k0, g);
    Ok([
        gp * (dr[0] / r),
        gp * (dr[1] / r),
        gp * (dr[2] / r),
    ])
}

/// Dyadic kernel D(r) = (k0^2 I + grad grad) g evaluated at displacement dr,
/// returned as the 6 independent components (xx, xy, xz, yy, yz, zz).
///
/// E_sca = (i omega eps0)^{-1} D * (J dV) for a point-like source.
pub fn dyadic_green<T: Real>(dr: [T; 3], k0: T) -> Result<[Cplx<T>; 6]> {
    let r = norm3(dr);
    let g = scalar_green(r, k0)?;
    let inv_r = T::one() / r;
    let inv_r2 = inv_r * inv_r;
    let k2 = k0 * k0;
    // (k0^2 - 1/r^2 - i k0/r) on the identity; (3/r^2 + 3 i k0/r - k0^2) on r_hat r_hat.
    let c_iso = Cplx::new(k2 - inv_r2, -k0 * inv_r) * g;
    let c_dir = Cplx::new(real::<T>(3.0) * inv_r2 - k2, real::<T>(3.0) * k0 * inv_r) * g;
    let u = [dr[0] * inv_r, dr[1] * inv_r, dr[2] * inv_r];
    Ok([
        c_iso + c_dir * (u[0] * u[0]),
        c_dir * (u[0] * u[1]),
        c_dir * (u[0] * u[2]),
        c_iso + c_dir * (u[1] * u[1]),
        c_dir * (u[1] * u[2]),
        c_iso + c_dir * (u[2] * u[2]),
    ])
}

/// Curl kernel: H contribution of a point current is grad g x J, so the
/// kernel is fully described by the vector a = grad g at the displacement.
pub fn curl_green<T: Real>(dr: [T; 3], k0: T) -> Result<[Cplx<T>; 3]> {
    grad_green(dr, k0)
}

/// Integral of g over the volume-equivalent sphere of a voxel:
/// S = int_{|r|<a} g dV with a = (3 dV / 4 pi)^{1/3}.
///
/// Closed form (1/k0^2) [(1 + i k0 a) e^{-i k0 a} - 1]; a^2/2 at k0 = 0.
pub fn self_term_scalar<T: Real>(voxel_volume: T, k0: T) -> Result<Cplx<T>> {
    if !(voxel_volume > T::zero()) {
        return Err(Error::invalid("voxel volume must be positive"));
    }
    let a = equivalent_sphere_radius(voxel_volume);
    if k0 == T::zero() {
        return Ok(Cplx::new(a * a / (T::one() + T::one()), T::zero()));
    }
    let ka = k0 * a;
    let e = Cplx::new(T::zero(), -ka).exp();
    let one = Cplx::new(T::one(), T::zero());
    let val = ((one + Cplx::new(T::zero(), ka)) * e - one) / Cplx::new(k0 * k0, T::zero());
    Ok(val)
}

/// Radius of the sphere with the same volume as the voxel.
#[inline]
pub fn equivalent_sphere_radius<T: Real>(voxel_volume: T) -> T {
    (real::<T>(3.0) * voxel_volume / (real::<T>(4.0) * T::PI())).powf(T::one() / real::<T>(3.0))
}

#[inline]
fn norm3<T: Real>(v: [T; 3]) -> T {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}
