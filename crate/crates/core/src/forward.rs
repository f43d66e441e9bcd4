//! Forward problem: solve the volume (VIE) and volume-surface (VSIE)
//! integral-equation systems and produce per-channel B1+ volumes.
//!
//! Unknown body currents live on masked voxels only. The body operator is
//! Z_bb = D(1/(i omega eps0 chi)) G - L with the FFT electric kernel; the
//! coupled system eliminates the coil block by a Schur complement,
//!   (Z_bb - C Zcc^{-1} C^T) j_b = C Zcc^{-1} v,   j_c = Zcc^{-1}(v + C^T j_b),
//! where C holds the (positive) tested incident-field columns, i.e. the
//! block matrix is [[Zcc, -C^T], [-C, Z_bb]].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::coil::{assemble_coupling, CouplingOperators, WireCoil};
use crate::ep::ComplexPermittivityField;
use crate::error::{Error, Result};
use crate::gmres::{solve_gmres, GmresStats, LinOp};
use crate::grid::{ComplexVolume, MaskIndex, VecField, VoxelGrid};
use crate::kernel::{
    assemble_electric_kernel, assemble_magnetic_kernel, electric_self_value, ToeplitzKernel,
};
use crate::linalg::{vec_norm, LuFactor};
use crate::scalar::{c0, eps0, mu0, real, Cplx, Real};

/// Krylov solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig<T> {
    /// Relative residual tolerance.
    pub tol: T,
    pub max_iters: usize,
    pub restart: usize,
}

impl<T: Real> Default for SolverConfig<T> {
    fn default() -> Self {
        Self {
            tol: real(1e-6),
            max_iters: 1000,
            restart: 50,
        }
    }
}

impl<T: Real> SolverConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > T::zero() && self.tol < T::one()) {
            return Err(Error::invalid("solver tolerance must be in (0, 1)"));
        }
        if self.max_iters == 0 || self.restart == 0 {
            return Err(Error::invalid("iteration caps must be positive"));
        }
        Ok(())
    }
}

/// Coil block attached to a forward model.
#[derive(Debug)]
pub struct CoilBlock<T: Real> {
    pub coil: WireCoil<T>,
    pub coupling: CouplingOperators<T>,
    pub zcc_lu: LuFactor<T>,
}

/// Grid- and frequency-level assembly shared by all solves: FFT kernels,
/// mask index, and optionally the coil coupling. Immutable after build.
#[derive(Debug)]
pub struct ForwardModel<T: Real> {
    pub grid: VoxelGrid<T>,
    pub mask: Vec<bool>,
    pub mask_index: MaskIndex,
    pub omega: T,
    pub k0: T,
    pub kernel_e: ToeplitzKernel<T>,
    pub kernel_h: ToeplitzKernel<T>,
    pub coil: Option<CoilBlock<T>>,
}

impl<T: Real> ForwardModel<T> {
    pub fn new(grid: VoxelGrid<T>, mask: Vec<bool>, omega: T) -> Result<Self> {
        if mask.len() != grid.len() {
            return Err(Error::invalid("mask length must match grid"));
        }
        if !(omega > T::zero()) {
            return Err(Error::invalid("omega must be positive"));
        }
        let k0 = omega / c0::<T>();
        let kernel_e = assemble_electric_kernel(&grid, k0)?;
        let kernel_h = assemble_magnetic_kernel(&grid, k0)?;
        let mask_index = MaskIndex::from_mask(&mask);
        Ok(Self {
            grid,
            mask,
            mask_index,
            omega,
            k0,
            kernel_e,
            kernel_h,
            coil: None,
        })
    }

    pub fn with_coil(mut self, coil: WireCoil<T>) -> Result<Self> {
        let coupling = assemble_coupling(&coil, &self.grid, &self.mask, self.k0)?;
        let zcc_lu = coupling.zcc_factor()?;
        self.coil = Some(CoilBlock {
            coil,
            coupling,
            zcc_lu,
        });
        Ok(self)
    }

    pub fn coil_block(&self) -> Result<&CoilBlock<T>> {
        self.coil
            .as_ref()
            .ok_or_else(|| Error::invalid("forward model has no coil attached"))
    }

    #[inline]
    pub fn n_masked(&self) -> usize {
        self.mask_index.count()
    }

    /// Diagonal coefficient dV/(i omega eps0 chi_k) per masked voxel.
    pub fn material_diagonal(&self, eps: &ComplexPermittivityField<T>) -> Result<Vec<Cplx<T>>> {
        if !eps.grid.same_layout(&self.grid) {
            return Err(Error::invalid("permittivity grid does not match model"));
        }
        let dv = self.grid.voxel_volume();
        let iwe = Cplx::new(T::zero(), self.omega * eps0::<T>());
        let one = Cplx::new(T::one(), T::zero());
        self.mask_index
            .voxels()
            .iter()
            .map(|&lin| {
                let chi = eps.eps[lin] - one;
                if chi.norm() < real::<T>(1e-12) {
                    return Err(Error::invalid(
                        "vanishing contrast chi on a masked voxel; keep eps_r above 1",
                    ));
                }
                Ok(Cplx::new(dv, T::zero()) / (iwe * chi))
            })
            .collect()
    }

    /// Circulant right preconditioner at the mean material coefficient:
    /// near-exact for homogeneous samples filling the grid, cheap otherwise.
    fn circulant_precond(&self, diag: &[Cplx<T>]) -> Result<BodyPrecond<'_, T>> {
        let n = diag.len();
        let sum = diag
            .iter()
            .fold(Cplx::new(T::zero(), T::zero()), |a, &b| a + b);
        let mean = sum / Cplx::new(T::from_usize(n).unwrap(), T::zero());
        let inv = self.kernel_e.uniform_inverse(mean)?;
        Ok(BodyPrecond { model: self, inv })
    }
}

/// Approximate inverse of the body operator restricted to masked voxels.
pub struct BodyPrecond<'a, T: Real> {
    model: &'a ForwardModel<T>,
    inv: ToeplitzKernel<T>,
}

impl<'a, T: Real> LinOp<T> for BodyPrecond<'a, T> {
    fn dim(&self) -> usize {
        3 * self.model.n_masked()
    }

    fn apply(&self, x: &[Cplx<T>], y: &mut [Cplx<T>]) {
        let mi = &self.model.mask_index;
        let full = mi.scatter(x, &self.model.grid);
        let out = self.inv.apply(&full).expect("grid verified");
        y.copy_from_slice(&mi.gather(&out));
    }
}

/// Matrix-free Z_bb restricted to masked voxels.
pub struct ZbbOp<'a, T: Real> {
    model: &'a ForwardModel<T>,
    diag: &'a [Cplx<T>],
}

impl<'a, T: Real> ZbbOp<'a, T> {
    pub fn new(model: &'a ForwardModel<T>, diag: &'a [Cplx<T>]) -> Self {
        Self { model, diag }
    }
}

impl<'a, T: Real> LinOp<T> for ZbbOp<'a, T> {
    fn dim(&self) -> usize {
        3 * self.model.n_masked()
    }

    fn apply(&self, x: &[Cplx<T>], y: &mut [Cplx<T>]) {
        let mi = &self.model.mask_index;
        let full = mi.scatter(x, &self.model.grid);
        let lx = self.model.kernel_e.apply(&full).expect("grid verified");
        let lmasked = mi.gather(&lx);
        let n = mi.count();
        for p in 0..3 {
            for k in 0..n {
                let i = p * n + k;
                y[i] = self.diag[k] * x[i] - lmasked[i];
            }
        }
    }
}

/// Matrix-free Schur complement Z_bb - C Zcc^{-1} C^T.
pub struct SchurOp<'a, T: Real> {
    zbb: ZbbOp<'a, T>,
    block: &'a CoilBlock<T>,
}

impl<'a, T: Real> LinOp<T> for SchurOp<'a, T> {
    fn dim(&self) -> usize {
        self.zbb.dim()
    }

    fn apply(&self, x: &[Cplx<T>], y: &mut [Cplx<T>]) {
        self.zbb.apply(x, y);
        let ct_x = self.block.coupling.zcb.matvec_transpose(x);
        let w = self.block.zcc_lu.solve(&ct_x);
        let c_w = self.block.coupling.zcb.matvec(&w);
        for i in 0..y.len() {
            y[i] -= c_w[i];
        }
    }
}

/// Solution of one VSIE excitation.
#[derive(Debug, Clone)]
pub struct VsieSolution<T> {
    /// Coil basis coefficients.
    pub j_c: Vec<Cplx<T>>,
    /// Body currents on masked voxels, component-major.
    pub j_b: Vec<Cplx<T>>,
    /// Relative residual of the full block system.
    pub residual: T,
    pub iterations: usize,
}

/// Solve Z_bb j_b = rhs (tested incident field on masked voxels).
pub fn solve_vie<T: Real>(
    model: &ForwardModel<T>,
    eps: &ComplexPermittivityField<T>,
    rhs_masked: &[Cplx<T>],
    cfg: &SolverConfig<T>,
    warm: Option<&[Cplx<T>]>,
) -> Result<(Vec<Cplx<T>>, GmresStats<T>)> {
    cfg.validate()?;
    let n = model.n_masked();
    if n == 0 {
        return Err(Error::invalid("mask is empty"));
    }
    if rhs_masked.len() != 3 * n {
        return Err(Error::invalid("rhs length must be 3 x masked voxels"));
    }
    let diag = model.material_diagonal(eps)?;
    let minv = model.jacobi_inverse(&diag)?;
    let op = ZbbOp::new(model, &diag);
    let mut x = match warm {
        Some(w) if w.len() == 3 * n => w.to_vec(),
        _ => vec![Cplx::new(T::zero(), T::zero()); 3 * n],
    };
    let stats = solve_gmres(&op, rhs_masked, &mut x, Some(&minv), cfg.tol, cfg.max_iters, cfg.restart)?;
    if !stats.converged {
        return Err(Error::solver(
            format!("VIE solve did not converge in {} iterations", cfg.max_iters),
            stats.residual.to_f64().unwrap_or(f64::NAN),
        ));
    }
    Ok((x, stats))
}

/// Solve the full block system A [x_c; x_b] = [rhs_c; rhs_b] through the
/// Schur complement. Shared by the forward excitation (rhs_b = 0) and the
/// adjoint solves of the gradient path.
pub fn solve_block<T: Real>(
    model: &ForwardModel<T>,
    eps: &ComplexPermittivityField<T>,
    rhs_c: &[Cplx<T>],
    rhs_b: &[Cplx<T>],
    cfg: &SolverConfig<T>,
    warm_b: Option<&[Cplx<T>]>,
) -> Result<VsieSolution<T>> {
    cfg.validate()?;
    let block = model.coil_block()?;
    let m = block.coil.basis_count();
    if rhs_c.len() != m {
        return Err(Error::invalid("coil rhs length mismatch"));
    }
    let n = model.n_masked();
    if n == 0 {
        // decoupled limit: x_c = Zcc^{-1} rhs_c
        let j_c = block.zcc_lu.solve(rhs_c);
        return Ok(VsieSolution {
            j_c,
            j_b: Vec::new(),
            residual: T::zero(),
            iterations: 0,
        });
    }
    if rhs_b.len() != 3 * n {
        return Err(Error::invalid("body rhs length mismatch"));
    }

    let diag = model.material_diagonal(eps)?;
    let minv = model.jacobi_inverse(&diag)?;
    let zbb = ZbbOp::new(model, &diag);
    let schur = SchurOp { zbb, block };

    // schur rhs = rhs_b + C Zcc^{-1} rhs_c
    let w = block.zcc_lu.solve(rhs_c);
    let c_w = block.coupling.zcb.matvec(&w);
    let mut srhs = rhs_b.to_vec();
    for i in 0..srhs.len() {
        srhs[i] += c_w[i];
    }

    let mut x_b = match warm_b {
        Some(w) if w.len() == 3 * n => w.to_vec(),
        _ => vec![Cplx::new(T::zero(), T::zero()); 3 * n],
    };
    let stats = solve_gmres(&schur, &srhs, &mut x_b, Some(&minv), cfg.tol, cfg.max_iters, cfg.restart)?;
    if !stats.converged {
        return Err(Error::solver(
            format!("VSIE Schur solve did not converge in {} iterations", cfg.max_iters),
            stats.residual.to_f64().unwrap_or(f64::NAN),
        ));
    }

    // x_c = Zcc^{-1} (rhs_c + C^T x_b)
    let ct_xb = block.coupling.zcb.matvec_transpose(&x_b);
    let rc: Vec<Cplx<T>> = rhs_c.iter().zip(&ct_xb).map(|(&a, &b)| a + b).collect();
    let x_c = block.zcc_lu.solve(&rc);

    // true block residual
    let residual = block_residual(model, &diag, block, &x_c, &x_b, rhs_c, rhs_b);
    Ok(VsieSolution {
        j_c: x_c,
        j_b: x_b,
        residual,
        iterations: stats.iterations,
    })
}

fn block_residual<T: Real>(
    model: &ForwardModel<T>,
    diag: &[Cplx<T>],
    block: &CoilBlock<T>,
    x_c: &[Cplx<T>],
    x_b: &[Cplx<T>],
    rhs_c: &[Cplx<T>],
    rhs_b: &[Cplx<T>],
) -> T {
    // row 1: Zcc x_c - C^T x_b - rhs_c
    let zcc_xc = block.coupling.zcc.matvec(x_c);
    let ct_xb = block.coupling.zcb.matvec_transpose(x_b);
    let r1: Vec<Cplx<T>> = (0..x_c.len())
        .map(|i| zcc_xc[i] - ct_xb[i] - rhs_c[i])
        .collect();
    // row 2: -C x_c + Zbb x_b - rhs_b
    let zbb = ZbbOp::new(model, diag);
    let mut zx = vec![Cplx::new(T::zero(), T::zero()); x_b.len()];
    zbb.apply(x_b, &mut zx);
    let c_xc = block.coupling.zcb.matvec(x_c);
    let r2: Vec<Cplx<T>> = (0..x_b.len())
        .map(|i| zx[i] - c_xc[i] - rhs_b[i])
        .collect();
    let num = (vec_norm(&r1).powi(2) + vec_norm(&r2).powi(2)).sqrt();
    let den = (vec_norm(rhs_c).powi(2) + vec_norm(rhs_b).powi(2)).sqrt();
    if den == T::zero() {
        num
    } else {
        num / den
    }
}

/// Solve the VSIE for one transmit channel (unit port excitation).
pub fn solve_vsie<T: Real>(
    model: &ForwardModel<T>,
    eps: &ComplexPermittivityField<T>,
    channel: usize,
    cfg: &SolverConfig<T>,
    warm_b: Option<&[Cplx<T>]>,
) -> Result<VsieSolution<T>> {
    let block = model.coil_block()?;
    let v = block.coil.port_vector(channel)?;
    let zeros = vec![Cplx::new(T::zero(), T::zero()); 3 * model.n_masked()];
    solve_block(model, eps, &v, &zeros, cfg, warm_b)
}

/// Stack of per-channel complex B1+ volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct B1Set<T> {
    pub grid: VoxelGrid<T>,
    pub channels: Vec<Vec<Cplx<T>>>,
}

impl<T: Real> B1Set<T> {
    pub fn new(grid: VoxelGrid<T>, channels: Vec<Vec<Cplx<T>>>) -> Result<Self> {
        let n = grid.len();
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::invalid("all channels must share the grid"));
        }
        if channels
            .iter()
            .any(|c| c.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()))
        {
            return Err(Error::invalid("B1 values must be finite"));
        }
        Ok(Self { grid, channels })
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }
}

/// B1+ from a Gram-tested total magnetic field: mu0 (Hx + i Hy) after
/// normalizing tested values back to field units (F = G^{-1} [1 i 0] (x) I).
pub fn b1_from_tested_h<T: Real>(h_tested: &VecField<T>) -> ComplexVolume<T> {
    let n = h_tested.grid.len();
    let dv = h_tested.grid.voxel_volume();
    let m0 = mu0::<T>();
    let mut out = ComplexVolume::zeros(h_tested.grid.clone());
    let hx = h_tested.comp(0);
    let hy = h_tested.comp(1);
    for v in 0..n {
        let h = hx[v] + Cplx::new(T::zero(), T::one()) * hy[v];
        out.data[v] = h * (m0 / dv);
    }
    out
}

/// VIE path: B1+ = mu0 F (h_inc + K_bb j_b), h_inc Gram-tested.
pub fn b1plus_vie<T: Real>(
    model: &ForwardModel<T>,
    j_b_masked: &[Cplx<T>],
    h_inc_tested: &VecField<T>,
) -> Result<ComplexVolume<T>> {
    if !h_inc_tested.grid.same_layout(&model.grid) {
        return Err(Error::invalid("incident field grid mismatch"));
    }
    let full = model.mask_index.scatter(j_b_masked, &model.grid);
    let mut h = model.kernel_h.apply(&full)?;
    for (dst, src) in h.raw_mut().iter_mut().zip(h_inc_tested.raw()) {
        *dst += *src;
    }
    Ok(b1_from_tested_h(&h))
}

/// VSIE path: B1+ = mu0 F G^{-1} (K_cb j_c + K_bb j_b).
pub fn b1plus_vsie<T: Real>(model: &ForwardModel<T>, sol: &VsieSolution<T>) -> Result<ComplexVolume<T>> {
    let block = model.coil_block()?;
    let h_inc = block.coupling.kcb_full.matvec(&sol.j_c);
    let mut h_field = VecField::zeros(model.grid.clone());
    h_field.raw_mut().copy_from_slice(&h_inc);
    if sol.j_b.is_empty() {
        return Ok(b1_from_tested_h(&h_field));
    }
    b1plus_vie(model, &sol.j_b, &h_field)
}

/// Add white complex Gaussian noise with per-channel std max|B1|/snr
/// (real and imaginary parts each std/sqrt(2)); deterministic in the seed.
pub fn add_peak_snr_noise<T: Real>(b1: &B1Set<T>, snr: T, seed: u64) -> Result<B1Set<T>>
where
    StandardNormal: Distribution<T>,
{
    if !(snr > T::zero()) {
        return Err(Error::invalid("snr must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = b1.clone();
    if snr.is_infinite() {
        return Ok(out);
    }
    let half = real::<T>(0.5).sqrt();
    for ch in out.channels.iter_mut() {
        let peak = ch.iter().map(|c| c.norm()).fold(T::zero(), |a, b| a.max(b));
        let std = peak / snr * half;
        if std == T::zero() {
            continue;
        }
        let normal = Normal::new(T::zero(), std)
            .map_err(|e| Error::invalid(format!("noise distribution: {e}")))?;
        for v in ch.iter_mut() {
            let re: T = normal.sample(&mut rng);
            let im: T = normal.sample(&mut rng);
            *v += Cplx::new(re, im);
        }
    }
    Ok(out)
}

/// Phase-shim a volume so the phase at voxel `v` is exactly zero;
/// magnitudes are unchanged.
pub fn shim_zero_phase<T: Real>(vol: &ComplexVolume<T>, v: usize) -> Result<ComplexVolume<T>> {
    let b_v = vol.data[v];
    let mag = b_v.norm();
    if mag == T::zero() {
        return Err(Error::invalid("cannot shim: zero field at the reference voxel"));
    }
    let factor = b_v.conj() / Cplx::new(mag, T::zero());
    let mut out = vol.clone();
    for c in out.data.iter_mut() {
        *c *= factor;
    }
    Ok(out)
}

/// Tested plane-wave incident field E = x_hat amplitude e^{-i k0 z}.
pub fn plane_wave_e_inc<T: Real>(grid: &VoxelGrid<T>, k0: T, amplitude: T) -> VecField<T> {
    let mut e = VecField::zeros(grid.clone());
    let dv = grid.voxel_volume();
    for v in 0..grid.len() {
        let z = grid.center_lin(v)[2];
        let ph = -k0 * z;
        e.comp_mut(0)[v] = Cplx::new(ph.cos(), ph.sin()) * (amplitude * dv);
    }
    e
}
