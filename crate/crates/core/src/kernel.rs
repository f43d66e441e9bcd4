//! Translation-invariant discretized Green's-operator blocks on the voxel
//! grid, applied by zero-padded circular FFT convolution.
//!
//! The electric kernel realizes the Galerkin-tested scattered-field operator
//! L on a piecewise-constant basis: off-diagonal entries are the dyadic
//! kernel at voxel-center offsets scaled by dV^2, the self block uses the
//! volume-equivalent-sphere integral plus the -I/3 depolarization dyadic,
//! all times dV. The magnetic kernel discretizes curl(int g j): the entry is
//! grad g x (.) scaled by dV^2 with a zero self block.

use crate::error::{Error, Result};
use crate::fft::Fft3;
use crate::green::{curl_green, dyadic_green, self_term_scalar};
use crate::grid::{VecField, VoxelGrid};
use crate::scalar::{c0, eps0, real, Cplx, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Electric,
    Magnetic,
}

/// Diagonal Gram matrix of the piecewise-constant basis: dV per component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GramDiag<T> {
    pub delta_v: T,
}

impl<T: Real> GramDiag<T> {
    pub fn from_grid(grid: &VoxelGrid<T>) -> Self {
        Self {
            delta_v: grid.voxel_volume(),
        }
    }
}

/// FFT-ready translation-invariant kernel blocks over a grid.
///
/// Electric tables: 6 spectral blocks (xx, xy, xz, yy, yz, zz), symmetric in
/// components and even in the offset. Magnetic tables: the 3 spectral
/// components of grad g (odd in the offset); the block matrix is the cross
/// product with that vector, antisymmetric in components with zero diagonal.
pub struct ToeplitzKernel<T: Real> {
    kind: KernelKind,
    k0: T,
    grid: VoxelGrid<T>,
    embed: [usize; 3],
    fft: Fft3<T>,
    tables: Vec<Vec<Cplx<T>>>,
}

impl<T: Real> std::fmt::Debug for ToeplitzKernel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToeplitzKernel")
            .field("kind", &self.kind)
            .field("k0", &self.k0)
            .field("dims", &self.grid.dims())
            .finish()
    }
}

/// (i omega eps0)^{-1} with omega = k0 c in vacuum background.
#[inline]
pub fn inv_i_omega_eps0<T: Real>(k0: T) -> Cplx<T> {
    let omega = k0 * c0::<T>();
    Cplx::new(T::zero(), -(T::one() / (omega * eps0::<T>())))
}

/// Galerkin-tested self value of the electric kernel's diagonal components:
/// (i omega eps0)^{-1} (k0^2 S - 1/3) dV with S the equivalent-sphere integral.
pub fn electric_self_value<T: Real>(voxel_volume: T, k0: T) -> Result<Cplx<T>> {
    let s = self_term_scalar(voxel_volume, k0)?;
    let third = T::one() / real::<T>(3.0);
    Ok(inv_i_omega_eps0(k0) * (s * (k0 * k0) - Cplx::new(third, T::zero())) * voxel_volume)
}

pub fn assemble_electric_kernel<T: Real>(grid: &VoxelGrid<T>, k0: T) -> Result<ToeplitzKernel<T>> {
    if !(k0 > T::zero()) {
        return Err(Error::invalid("electric kernel requires k0 > 0"));
    }
    ToeplitzKernel::assemble(KernelKind::Electric, grid, k0)
}

pub fn assemble_magnetic_kernel<T: Real>(grid: &VoxelGrid<T>, k0: T) -> Result<ToeplitzKernel<T>> {
    if !(k0 >= T::zero()) {
        return Err(Error::invalid("k0 must be non-negative"));
    }
    ToeplitzKernel::assemble(KernelKind::Magnetic, grid, k0)
}

impl<T: Real> ToeplitzKernel<T> {
    fn assemble(kind: KernelKind, grid: &VoxelGrid<T>, k0: T) -> Result<Self> {
        let [nx, ny, nz] = grid.dims();
        let embed = [2 * nx, 2 * ny, 2 * nz];
        let ne = embed[0] * embed[1] * embed[2];
        let res = grid.resolution();
        let dv = grid.voxel_volume();
        let dv2 = dv * dv;
        let zero = Cplx::new(T::zero(), T::zero());

        let ntab = match kind {
            KernelKind::Electric => 6,
            KernelKind::Magnetic => 3,
        };
        let mut tables = vec![vec![zero; ne]; ntab];

        let wrap = |d: isize, n: usize| -> usize {
            let m = 2 * n as isize;
            ((d % m + m) % m) as usize
        };

        let prefactor = match kind {
            KernelKind::Electric => inv_i_omega_eps0(k0),
            KernelKind::Magnetic => Cplx::new(T::one(), T::zero()),
        };

        for dz in -(nz as isize - 1)..nz as isize {
            for dy in -(ny as isize - 1)..ny as isize {
                for dx in -(nx as isize - 1)..nx as isize {
                    let lin = wrap(dx, nx)
                        + embed[0] * (wrap(dy, ny) + embed[1] * wrap(dz, nz));
                    if dx == 0 && dy == 0 && dz == 0 {
                        if kind == KernelKind::Electric {
                            let self_val = electric_self_value(dv, k0)?;
                            tables[0][lin] = self_val; // xx
                            tables[3][lin] = self_val; // yy
                            tables[5][lin] = self_val; // zz
                        }
                        // magnetic self block: principal value of the curl
                        // kernel vanishes over the symmetric cell
                        continue;
                    }
                    let dr = [
                        res * T::from_isize(dx).unwrap(),
                        res * T::from_isize(dy).unwrap(),
                        res * T::from_isize(dz).unwrap(),
                    ];
                    match kind {
                        KernelKind::Electric => {
                            let d = dyadic_green(dr, k0)?;
                            for c in 0..6 {
                                tables[c][lin] = prefactor * d[c] * dv2;
                            }
                        }
                        KernelKind::Magnetic => {
                            let a = curl_green(dr, k0)?;
                            for c in 0..3 {
                                tables[c][lin] = a[c] * dv2;
                            }
                        }
                    }
                }
            }
        }

        let fft = Fft3::new(embed);
        for t in tables.iter_mut() {
            fft.forward(t);
        }

        Ok(Self {
            kind,
            k0,
            grid: grid.clone(),
            embed,
            fft,
            tables,
        })
    }

    #[inline]
    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    #[inline]
    pub fn k0(&self) -> T {
        self.k0
    }

    #[inline]
    pub fn grid(&self) -> &VoxelGrid<T> {
        &self.grid
    }

    /// y(p) = sum_q block(pq) (x) via zero-padded circular convolution.
    ///
    /// Reentrant: scratch is allocated per invocation.
    pub fn apply(&self, x: &VecField<T>) -> Result<VecField<T>> {
        if !x.grid.same_layout(&self.grid) {
            return Err(Error::invalid("field grid does not match kernel grid"));
        }
        let zero = Cplx::new(T::zero(), T::zero());
        let ne = self.embed[0] * self.embed[1] * self.embed[2];

        // Pad and transform each input component.
        let mut xhat: Vec<Vec<Cplx<T>>> = Vec::with_capacity(3);
        for p in 0..3 {
            let mut buf = vec![zero; ne];
            self.embed_component(x.comp(p), &mut buf);
            self.fft.forward(&mut buf);
            xhat.push(buf);
        }

        let mut out = VecField::zeros(x.grid.clone());
        let t = &self.tables;
        for p in 0..3 {
            let mut yhat = vec![zero; ne];
            match self.kind {
                KernelKind::Electric => {
                    // symmetric 3x3 from 6 stored blocks
                    let rows = [[0usize, 1, 2], [1, 3, 4], [2, 4, 5]];
                    for i in 0..ne {
                        yhat[i] = t[rows[p][0]][i] * xhat[0][i]
                            + t[rows[p][1]][i] * xhat[1][i]
                            + t[rows[p][2]][i] * xhat[2][i];
                    }
                }
                KernelKind::Magnetic => {
                    // y = a x x (cross product), componentwise in the spectral domain
                    let (q, s) = match p {
                        0 => (1, 2),
                        1 => (2, 0),
                        _ => (0, 1),
                    };
                    for i in 0..ne {
                        yhat[i] = t[q][i] * xhat[s][i] - t[s][i] * xhat[q][i];
                    }
                }
            }
            self.fft.inverse(&mut yhat);
            self.extract_component(&yhat, out.comp_mut(p));
        }
        Ok(out)
    }

    /// Circulant approximate inverse of (d I - L) for a uniform material
    /// coefficient d: the 3x3 symbol is inverted pointwise on the embedded
    /// spectral grid. Returned as a kernel-shaped operator whose `apply`
    /// realizes the inverse; used as a right preconditioner.
    pub fn uniform_inverse(&self, d: Cplx<T>) -> Result<ToeplitzKernel<T>> {
        if self.kind != KernelKind::Electric {
            return Err(Error::invalid("uniform inverse defined for the electric kernel"));
        }
        let ne = self.embed[0] * self.embed[1] * self.embed[2];
        let zero = Cplx::new(T::zero(), T::zero());
        let mut inv = vec![vec![zero; ne]; 6];
        let fallback = Cplx::new(T::one(), T::zero()) / d;
        let mut scale = T::zero();
        for i in 0..ne {
            let a = (d - self.tables[0][i]).norm();
            scale = scale.max(a);
        }
        let tiny = scale * scale * scale * T::epsilon();
        for i in 0..ne {
            // symbol S = d I - T, symmetric 3x3
            let a = d - self.tables[0][i];
            let b = -self.tables[1][i];
            let c = -self.tables[2][i];
            let e = d - self.tables[3][i];
            let f = -self.tables[4][i];
            let g = d - self.tables[5][i];
            let det = a * (e * g - f * f) - b * (b * g - c * f) + c * (b * f - c * e);
            if det.norm() <= tiny {
                inv[0][i] = fallback;
                inv[3][i] = fallback;
                inv[5][i] = fallback;
                continue;
            }
            let idet = Cplx::new(T::one(), T::zero()) / det;
            inv[0][i] = (e * g - f * f) * idet;
            inv[1][i] = (c * f - b * g) * idet;
            inv[2][i] = (b * f - c * e) * idet;
            inv[3][i] = (a * g - c * c) * idet;
            inv[4][i] = (b * c - a * f) * idet;
            inv[5][i] = (a * e - b * b) * idet;
        }
        Ok(ToeplitzKernel {
            kind: KernelKind::Electric,
            k0: self.k0,
            grid: self.grid.clone(),
            embed: self.embed,
            fft: self.fft.clone(),
            tables: inv,
        })
    }

    fn embed_component(&self, src: &[Cplx<T>], dst: &mut [Cplx<T>]) {
        let [nx, ny, nz] = self.grid.dims();
        let [ex, ey, _] = self.embed;
        for k in 0..nz {
            for j in 0..ny {
                let s0 = nx * (j + ny * k);
                let d0 = ex * (j + ey * k);
                dst[d0..d0 + nx].copy_from_slice(&src[s0..s0 + nx]);
            }
        }
    }

    fn extract_component(&self, src: &[Cplx<T>], dst: &mut [Cplx<T>]) {
        let [nx, ny, nz] = self.grid.dims();
        let [ex, ey, _] = self.embed;
        for k in 0..nz {
            for j in 0..ny {
                let s0 = ex * (j + ey * k);
                let d0 = nx * (j + ny * k);
                dst[d0..d0 + nx].copy_from_slice(&src[s0..s0 + nx]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct O(n^2) application of the same discretized operator,
    /// evaluating the Green kernels pair by pair.
    fn dense_apply(
        kind: KernelKind,
        grid: &VoxelGrid<f64>,
        k0: f64,
        x: &VecField<f64>,
    ) -> VecField<f64> {
        let n = grid.len();
        let dv = grid.voxel_volume();
        let dv2 = dv * dv;
        let mut y = VecField::zeros(grid.clone());
        for vo in 0..n {
            let ro = grid.center_lin(vo);
            for vs in 0..n {
                let rs = grid.center_lin(vs);
                if vo == vs {
                    if kind == KernelKind::Electric {
                        let sv = electric_self_value(dv, k0).unwrap();
                        for p in 0..3 {
                            let acc = y.get(p, vo) + sv * x.get(p, vs);
                            y.set(p, vo, acc);
                        }
                    }
                    continue;
                }
                let dr = [ro[0] - rs[0], ro[1] - rs[1], ro[2] - rs[2]];
                match kind {
                    KernelKind::Electric => {
                        let d = dyadic_green(dr, k0).unwrap();
                        let pref = inv_i_omega_eps0(k0);
                        let m = [[d[0], d[1], d[2]], [d[1], d[3], d[4]], [d[2], d[4], d[5]]];
                        for p in 0..3 {
                            let mut acc = y.get(p, vo);
                            for q in 0..3 {
                                acc += pref * m[p][q] * x.get(q, vs) * dv2;
                            }
                            y.set(p, vo, acc);
                        }
                    }
                    KernelKind::Magnetic => {
                        let a = curl_green(dr, k0).unwrap();
                        let xv = [x.get(0, vs), x.get(1, vs), x.get(2, vs)];
                        let cross = [
                            a[1] * xv[2] - a[2] * xv[1],
                            a[2] * xv[0] - a[0] * xv[2],
                            a[0] * xv[1] - a[1] * xv[0],
                        ];
                        for p in 0..3 {
                            let acc = y.get(p, vo) + cross[p] * dv2;
                            y.set(p, vo, acc);
                        }
                    }
                }
            }
        }
        y
    }

    fn random_field(grid: &VoxelGrid<f64>, seed: u64) -> VecField<f64> {
        // deterministic pseudo-random field without pulling in rand here
        let mut f = VecField::zeros(grid.clone());
        let n = grid.len();
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state as f64 / u64::MAX as f64) * 2.0 - 1.0
        };
        for p in 0..3 {
            for v in 0..n {
                let c = Cplx::new(next(), next());
                f.set(p, v, c);
            }
        }
        f
    }

    #[test]
    fn fft_matches_dense_summation_electric() {
        let grid = VoxelGrid::<f64>::centered([4, 4, 4], 0.005).unwrap();
        let k0 = 6.229;
        let kern = assemble_electric_kernel(&grid, k0).unwrap();
        let x = random_field(&grid, 3);
        let y_fft = kern.apply(&x).unwrap();
        let y_dense = dense_apply(KernelKind::Electric, &grid, k0, &x);
        let mut num = 0.0;
        let mut den = 0.0;
        for p in 0..3 {
            for v in 0..grid.len() {
                num += (y_fft.get(p, v) - y_dense.get(p, v)).norm_sqr();
                den += y_dense.get(p, v).norm_sqr();
            }
        }
        assert!((num / den).sqrt() < 1e-12, "rel err {}", (num / den).sqrt());
    }

    #[test]
    fn fft_matches_dense_summation_magnetic() {
        let grid = VoxelGrid::<f64>::new([3, 4, 2], 0.004, [0.0; 3]).unwrap();
        let k0 = 6.229;
        let kern = assemble_magnetic_kernel(&grid, k0).unwrap();
        let x = random_field(&grid, 11);
        let y_fft = kern.apply(&x).unwrap();
        let y_dense = dense_apply(KernelKind::Magnetic, &grid, k0, &x);
        let mut num = 0.0;
        let mut den = 0.0;
        for p in 0..3 {
            for v in 0..grid.len() {
                num += (y_fft.get(p, v) - y_dense.get(p, v)).norm_sqr();
                den += y_dense.get(p, v).norm_sqr();
            }
        }
        assert!((num / den).sqrt() < 1e-12);
    }

    #[test]
    fn zero_input_zero_output_and_linearity() {
        let grid = VoxelGrid::<f64>::centered([3, 3, 3], 0.005).unwrap();
        let kern = assemble_electric_kernel(&grid, 6.229).unwrap();
        let zero = VecField::zeros(grid.clone());
        let y = kern.apply(&zero).unwrap();
        assert!(y.raw().iter().all(|c| c.norm() == 0.0));

        let x1 = random_field(&grid, 5);
        let x2 = random_field(&grid, 6);
        let alpha = Cplx::new(0.3, -1.1);
        let mut combo = VecField::zeros(grid.clone());
        for i in 0..combo.raw().len() {
            combo.raw_mut()[i] = alpha * x1.raw()[i] + x2.raw()[i];
        }
        let lhs = kern.apply(&combo).unwrap();
        let y1 = kern.apply(&x1).unwrap();
        let y2 = kern.apply(&x2).unwrap();
        for i in 0..lhs.raw().len() {
            let rhs = alpha * y1.raw()[i] + y2.raw()[i];
            assert!((lhs.raw()[i] - rhs).norm() < 1e-12 * (1.0 + rhs.norm()));
        }
    }

    #[test]
    fn translation_invariance() {
        let a = VoxelGrid::<f64>::new([3, 3, 3], 0.005, [0.0; 3]).unwrap();
        let b = VoxelGrid::<f64>::new([3, 3, 3], 0.005, [1.0, -2.0, 0.5]).unwrap();
        let ka = assemble_electric_kernel(&a, 6.229).unwrap();
        let kb = assemble_electric_kernel(&b, 6.229).unwrap();
        let x = random_field(&a, 7);
        let mut xb = VecField::zeros(b.clone());
        xb.raw_mut().copy_from_slice(x.raw());
        let ya = ka.apply(&x).unwrap();
        let yb = kb.apply(&xb).unwrap();
        for i in 0..ya.raw().len() {
            assert_eq!(ya.raw()[i], yb.raw()[i]);
        }
    }

    #[test]
    fn magnetic_static_limit_is_biot_savart() {
        // One voxel carrying a y-directed current observed at distance d
        // along x: H = J dV x R_hat / (4 pi d^2) = -z_hat dV/(4 pi d^2).
        let grid = VoxelGrid::<f64>::new([5, 1, 1], 0.005, [0.0; 3]).unwrap();
        let k0 = 1e-9; // effectively static
        let kern = assemble_magnetic_kernel(&grid, k0).unwrap();
        let mut x = VecField::zeros(grid.clone());
        x.set(1, 0, Cplx::new(1.0, 0.0)); // unit y current density in voxel 0
        let y = kern.apply(&x).unwrap();
        let dv = grid.voxel_volume();
        let d = 4.0 * 0.005; // voxel 4 center minus voxel 0 center
        let expected = -dv / (4.0 * std::f64::consts::PI * d * d); // z comp, tested value / dv
        // Tested operator value is field * dV at the observer.
        let got = y.get(2, 4) / Cplx::new(dv, 0.0);
        assert!(
            (got.re - expected).abs() < 1e-6 * expected.abs(),
            "got {} expected {}",
            got.re,
            expected
        );
        assert!(y.get(0, 4).norm() < 1e-20);
        assert!(y.get(1, 4).norm() < 1e-20);
    }

    #[test]
    fn zbb_complex_symmetric_on_small_grid() {
        // Z = D(1/(i w eps0 chi)) G - L is complex-symmetric in the
        // unconjugated bilinear form.
        let grid = VoxelGrid::<f64>::centered([3, 3, 3], 0.005).unwrap();
        let k0 = 6.229;
        let omega = k0 * crate::scalar::C0_F64;
        let kern = assemble_electric_kernel(&grid, k0).unwrap();
        let dv = grid.voxel_volume();
        let chi = Cplx::new(79.0, -36.0);
        let dcoef = Cplx::new(1.0, 0.0)
            / (Cplx::new(0.0, omega * crate::scalar::EPS0_F64) * chi)
            * dv;
        let zapply = |x: &VecField<f64>| -> VecField<f64> {
            let l = kern.apply(x).unwrap();
            let mut out = VecField::zeros(grid.clone());
            for i in 0..out.raw().len() {
                out.raw_mut()[i] = dcoef * x.raw()[i] - l.raw()[i];
            }
            out
        };
        let x = random_field(&grid, 21);
        let yv = random_field(&grid, 22);
        let zy = zapply(&yv);
        let zx = zapply(&x);
        let dot = |a: &VecField<f64>, b: &VecField<f64>| -> Cplx<f64> {
            a.raw()
                .iter()
                .zip(b.raw())
                .map(|(&u, &v)| u * v)
                .fold(Cplx::new(0.0, 0.0), |acc, t| acc + t)
        };
        let lhs = dot(&x, &zy);
        let rhs = dot(&yv, &zx);
        assert!((lhs - rhs).norm() < 1e-10 * lhs.norm());
    }
}
