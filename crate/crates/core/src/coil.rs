//! Thin-wire transmit-coil model: geometry with triangular (hat) basis
//! functions on wire nodes, the method-of-moments self matrix with lumped
//! elements and delta-gap ports, and coil-to-body coupling operators.
//!
//! Sign convention: the self matrix follows the usual impedance convention
//! Z = -<f, E(f')> so that passive loops have positive input resistance.
//! Coupling matrices store the (positive) Galerkin-tested incident fields at
//! the voxels; the volume-surface block system carries the minus sign on the
//! off-diagonal blocks.

use crate::error::{Error, Result};
use crate::grid::{MaskIndex, VecField, VoxelGrid};
use crate::kernel::inv_i_omega_eps0;
use crate::linalg::{DenseMatrix, LuFactor};
use crate::scalar::{c0, real, Cplx, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub a: usize,
    pub b: usize,
}

/// Hat basis centered on a node: rises along the segment ending at the node,
/// falls along the segment leaving it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HatBasis {
    pub node: usize,
    pub seg_in: usize,
    pub seg_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Port<T> {
    pub basis: usize,
    pub voltage: Cplx<T>,
    pub channel: usize,
}

/// Thin-wire coil discretization.
#[derive(Debug, Clone)]
pub struct WireCoil<T> {
    pub nodes: Vec<[T; 3]>,
    pub segments: Vec<Segment>,
    pub wire_radius: T,
    pub bases: Vec<HatBasis>,
    pub ports: Vec<Port<T>>,
    /// (basis index, series impedance) pairs added to the Zcc diagonal.
    pub lumped: Vec<(usize, Cplx<T>)>,
    /// basis index at each node, if any
    node_basis: Vec<Option<usize>>,
}

impl<T: Real> WireCoil<T> {
    /// Build a coil from nodes and segments; hat bases are created on every
    /// node that has exactly one incoming and one outgoing segment (interior
    /// nodes of chains, every node of closed loops).
    pub fn new(nodes: Vec<[T; 3]>, segments: Vec<Segment>, wire_radius: T) -> Result<Self> {
        if !(wire_radius > T::zero()) {
            return Err(Error::invalid("wire radius must be positive"));
        }
        let nn = nodes.len();
        let mut incoming = vec![Vec::new(); nn];
        let mut outgoing = vec![Vec::new(); nn];
        let mut min_len = T::infinity();
        for (si, s) in segments.iter().enumerate() {
            if s.a >= nn || s.b >= nn || s.a == s.b {
                return Err(Error::invalid("segment references invalid nodes"));
            }
            outgoing[s.a].push(si);
            incoming[s.b].push(si);
            let len = dist(nodes[s.a], nodes[s.b]);
            if !(len > T::zero()) {
                return Err(Error::Assembly("zero-length segment".into()));
            }
            min_len = min_len.min(len);
        }
        // coincident distinct segments are an assembly error
        for i in 0..segments.len() {
            for j in i + 1..segments.len() {
                let (p, q) = (segments[i], segments[j]);
                if (p.a == q.a && p.b == q.b) || (p.a == q.b && p.b == q.a) {
                    return Err(Error::Assembly(format!("segments {i} and {j} coincide")));
                }
            }
        }
        if !(wire_radius < min_len * real::<T>(0.5)) {
            return Err(Error::invalid(
                "wire radius must be much smaller than the shortest segment",
            ));
        }
        let mut bases = Vec::new();
        let mut node_basis = vec![None; nn];
        for n in 0..nn {
            if incoming[n].len() == 1 && outgoing[n].len() == 1 {
                node_basis[n] = Some(bases.len());
                bases.push(HatBasis {
                    node: n,
                    seg_in: incoming[n][0],
                    seg_out: outgoing[n][0],
                });
            } else if incoming[n].len() > 1 || outgoing[n].len() > 1 {
                return Err(Error::Assembly(format!(
                    "node {n} is a junction; only chains and loops are supported"
                )));
            }
        }
        Ok(Self {
            nodes,
            segments,
            wire_radius,
            bases,
            ports: Vec::new(),
            lumped: Vec::new(),
            node_basis,
        })
    }

    pub fn add_port(&mut self, basis: usize, voltage: Cplx<T>, channel: usize) -> Result<()> {
        if basis >= self.bases.len() {
            return Err(Error::invalid("port basis out of range"));
        }
        if self.ports.iter().any(|p| p.channel == channel) {
            return Err(Error::invalid(format!("channel {channel} already has a port")));
        }
        self.ports.push(Port {
            basis,
            voltage,
            channel,
        });
        Ok(())
    }

    pub fn add_lumped(&mut self, basis: usize, impedance: Cplx<T>) -> Result<()> {
        if basis >= self.bases.len() {
            return Err(Error::invalid("lumped basis out of range"));
        }
        self.lumped.push((basis, impedance));
        Ok(())
    }

    #[inline]
    pub fn basis_count(&self) -> usize {
        self.bases.len()
    }

    pub fn channel_count(&self) -> usize {
        self.ports.iter().map(|p| p.channel + 1).max().unwrap_or(0)
    }

    /// Excitation vector of one channel: a single nonzero entry at its port.
    pub fn port_vector(&self, channel: usize) -> Result<Vec<Cplx<T>>> {
        let port = self
            .ports
            .iter()
            .find(|p| p.channel == channel)
            .ok_or_else(|| Error::invalid(format!("channel {channel} has no port")))?;
        let mut v = vec![Cplx::new(T::zero(), T::zero()); self.bases.len()];
        v[port.basis] = port.voltage;
        Ok(v)
    }

    #[inline]
    fn seg_point(&self, s: usize, xi: T) -> [T; 3] {
        let Segment { a, b } = self.segments[s];
        let pa = self.nodes[a];
        let pb = self.nodes[b];
        [
            pa[0] + (pb[0] - pa[0]) * xi,
            pa[1] + (pb[1] - pa[1]) * xi,
            pa[2] + (pb[2] - pa[2]) * xi,
        ]
    }

    #[inline]
    fn seg_len(&self, s: usize) -> T {
        let Segment { a, b } = self.segments[s];
        dist(self.nodes[a], self.nodes[b])
    }

    #[inline]
    fn seg_dir(&self, s: usize) -> [T; 3] {
        let Segment { a, b } = self.segments[s];
        let pa = self.nodes[a];
        let pb = self.nodes[b];
        let len = self.seg_len(s);
        [
            (pb[0] - pa[0]) / len,
            (pb[1] - pa[1]) / len,
            (pb[2] - pa[2]) / len,
        ]
    }

    /// Basis indices weighting a segment's current: (at node a, at node b).
    /// I(xi) = c_a (1 - xi) + c_b xi along the segment.
    #[inline]
    fn seg_bases(&self, s: usize) -> (Option<usize>, Option<usize>) {
        let Segment { a, b } = self.segments[s];
        (self.node_basis[a], self.node_basis[b])
    }

    /// Bounding sphere of the wire (for coarse clearance checks).
    pub fn bounding_radius(&self, center: [T; 3]) -> T {
        self.nodes
            .iter()
            .map(|&n| dist(n, center))
            .fold(T::zero(), |a, b| a.max(b))
    }
}

#[inline]
fn dist<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Gauss-Legendre nodes and weights on [0, 1].
pub fn gauss_legendre<T: Real>(n: usize) -> (Vec<T>, Vec<T>) {
    assert!(n >= 1);
    // Newton iteration on P_n over [-1, 1], then map to [0, 1].
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let nf = n as f64;
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_and_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_and_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes.push(real::<T>(0.5 * (1.0 + x)));
        weights.push(real::<T>(0.5 * w));
    }
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Reduced-kernel scalar Green's function used on the wire:
/// g evaluated at sqrt(rho^2 + a_w^2), never singular.
#[inline]
fn reduced_green<T: Real>(r2: T, a_w: T, k0: T) -> Cplx<T> {
    let r = (r2 + a_w * a_w).sqrt();
    let four_pi = real::<T>(4.0) * T::PI();
    let phase = -k0 * r;
    Cplx::new(phase.cos(), phase.sin()) * (T::one() / (four_pi * r))
}

/// Thin-wire EFIE Galerkin self matrix with series lumped impedances on the
/// diagonal; complex-symmetric before lumped insertion.
pub fn assemble_zcc<T: Real>(coil: &WireCoil<T>, omega: T) -> Result<DenseMatrix<T>> {
    assemble_zcc_with_order(coil, omega, 4)
}

pub fn assemble_zcc_with_order<T: Real>(
    coil: &WireCoil<T>,
    omega: T,
    order: usize,
) -> Result<DenseMatrix<T>> {
    if !(omega > T::zero()) {
        return Err(Error::invalid("omega must be positive"));
    }
    let k0 = omega / c0::<T>();
    let m = coil.basis_count();
    let mut z = DenseMatrix::zeros(m, m);
    let (xi, w) = gauss_legendre::<T>(order);
    let pref = inv_i_omega_eps0(k0);
    let k2 = k0 * k0;
    let a_w = coil.wire_radius;
    let ns = coil.segments.len();

    for so in 0..ns {
        let len_o = coil.seg_len(so);
        let dir_o = coil.seg_dir(so);
        let (bo_a, bo_b) = coil.seg_bases(so);
        for ss in 0..ns {
            let len_s = coil.seg_len(ss);
            let dir_s = coil.seg_dir(ss);
            let (bs_a, bs_b) = coil.seg_bases(ss);
            let tdot = dir_o[0] * dir_s[0] + dir_o[1] * dir_s[1] + dir_o[2] * dir_s[2];

            // accumulate the four hat-pair integrals over this segment pair
            let zero = Cplx::new(T::zero(), T::zero());
            // vector-potential term: [obs hat shape][src hat shape],
            // shape 0 = (1 - xi) (hat at node a), shape 1 = xi (hat at node b)
            let mut tvec = [[zero; 2]; 2];
            let mut scalar_sum = zero; // integral of g alone (charge term)
            for i in 0..xi.len() {
                let po = coil.seg_point(so, xi[i]);
                let sh_o = [T::one() - xi[i], xi[i]];
                for j in 0..xi.len() {
                    let ps = coil.seg_point(ss, xi[j]);
                    let dx = po[0] - ps[0];
                    let dy = po[1] - ps[1];
                    let dz = po[2] - ps[2];
                    let r2 = dx * dx + dy * dy + dz * dz;
                    let g = reduced_green(r2, a_w, k0);
                    let wij = w[i] * w[j];
                    let gw = g * wij;
                    let sh_s = [T::one() - xi[j], xi[j]];
                    for oi in 0..2 {
                        for sj in 0..2 {
                            tvec[oi][sj] += gw * (sh_o[oi] * sh_s[sj]);
                        }
                    }
                    scalar_sum += gw;
                }
            }

            // distribute into basis pairs
            let obs_b = [bo_a, bo_b];
            let src_b = [bs_a, bs_b];
            // hat slope: -1/len for the basis at node a, +1/len at node b
            let slope = |end: usize, len: T| {
                if end == 0 {
                    -T::one() / len
                } else {
                    T::one() / len
                }
            };
            for (oi, ob) in obs_b.iter().enumerate() {
                let Some(mrow) = ob else { continue };
                for (sj, sb) in src_b.iter().enumerate() {
                    let Some(ncol) = sb else { continue };
                    let vec_term = tvec[oi][sj] * (k2 * tdot) * (len_o * len_s);
                    let chg_term =
                        scalar_sum * (slope(oi, len_o) * slope(sj, len_s)) * (len_o * len_s);
                    // Z = -pref (k0^2 T - S)
                    let val = -(pref * (vec_term - chg_term));
                    z.add_to(*mrow, *ncol, val);
                }
            }
        }
    }

    for &(b, imp) in &coil.lumped {
        z.add_to(b, b, imp);
    }
    Ok(z)
}

/// Coil-body coupling operators on masked voxels, plus full-grid copies used
/// to evaluate incident fields everywhere.
#[derive(Debug, Clone)]
pub struct CouplingOperators<T> {
    /// Tested incident electric field per unit basis coefficient, masked
    /// rows, component-major (p * n_masked + v), shape (3 n_masked, m).
    pub zcb: DenseMatrix<T>,
    /// Tested incident magnetic field, same layout.
    pub kcb: DenseMatrix<T>,
    /// Coil self matrix with lumped elements.
    pub zcc: DenseMatrix<T>,
    /// Full-grid tested electric coupling, shape (3 n_v, m).
    pub zcb_full: DenseMatrix<T>,
    /// Full-grid tested magnetic coupling, shape (3 n_v, m).
    pub kcb_full: DenseMatrix<T>,
}

impl<T: Real> CouplingOperators<T> {
    pub fn zcc_factor(&self) -> Result<LuFactor<T>> {
        LuFactor::factor(&self.zcc)
    }
}

pub fn assemble_coupling<T: Real>(
    coil: &WireCoil<T>,
    grid: &VoxelGrid<T>,
    mask: &[bool],
    k0: T,
) -> Result<CouplingOperators<T>> {
    assemble_coupling_with_order(coil, grid, mask, k0, 4)
}

pub fn assemble_coupling_with_order<T: Real>(
    coil: &WireCoil<T>,
    grid: &VoxelGrid<T>,
    mask: &[bool],
    k0: T,
    order: usize,
) -> Result<CouplingOperators<T>> {
    if !(k0 > T::zero()) {
        return Err(Error::invalid(
            "coupling assembly requires k0 > 0 (charge term diverges at DC)",
        ));
    }
    if mask.len() != grid.len() {
        return Err(Error::invalid("mask length must match grid"));
    }
    // coil conductors must not enter the sample
    for s in 0..coil.segments.len() {
        for &xi in &[T::zero(), real::<T>(0.5), T::one()] {
            let p = coil.seg_point(s, xi);
            if let Some([i, j, k]) = grid.voxel_of(p) {
                if mask[grid.linear(i, j, k)] {
                    return Err(Error::invalid(
                        "coil intersects the sample mask; move the conductors outside",
                    ));
                }
            }
        }
    }

    let m = coil.basis_count();
    let n_v = grid.len();
    let mask_index = MaskIndex::from_mask(mask);
    let n_m = mask_index.count();
    let dv = grid.voxel_volume();
    let pref = inv_i_omega_eps0(k0);
    let k2 = k0 * k0;
    let (xi, w) = gauss_legendre::<T>(order);

    let mut zcb_full = DenseMatrix::zeros(3 * n_v, m);
    let mut kcb_full = DenseMatrix::zeros(3 * n_v, m);

    let mut warned = false;
    for v in 0..n_v {
        let rv = grid.center_lin(v);
        for s in 0..coil.segments.len() {
            let len = coil.seg_len(s);
            let dir = coil.seg_dir(s);
            let (ba, bb) = coil.seg_bases(s);
            for q in 0..xi.len() {
                let mut pq = coil.seg_point(s, xi[q]);
                let mut dx = rv[0] - pq[0];
                let mut dy = rv[1] - pq[1];
                let mut dz = rv[2] - pq[2];
                let mut r2 = dx * dx + dy * dy + dz * dz;
                if r2 < grid.resolution() * grid.resolution() * real::<T>(1e-24) {
                    // quadrature point on a voxel center: nudge it
                    if !warned {
                        log::warn!("coupling quadrature point coincides with a voxel center; perturbing");
                        warned = true;
                    }
                    let nudge = grid.resolution() * real::<T>(1e-9);
                    pq[0] = pq[0] + nudge;
                    dx = rv[0] - pq[0];
                    dy = rv[1] - pq[1];
                    dz = rv[2] - pq[2];
                    r2 = dx * dx + dy * dy + dz * dz;
                }
                let r = r2.sqrt();
                let four_pi = real::<T>(4.0) * T::PI();
                let phase = -k0 * r;
                let g = Cplx::new(phase.cos(), phase.sin()) * (T::one() / (four_pi * r));
                // grad_r g = g'(r) r_hat, g' = -(1/r + i k0) g
                let gp = -(Cplx::new(T::one() / r, k0)) * g;
                let rhat = [dx / r, dy / r, dz / r];
                let wq = w[q] * len;
                let sh = [T::one() - xi[q], xi[q]];
                let slope = [-T::one() / len, T::one() / len];

                for (end, basis) in [(0usize, ba), (1usize, bb)] {
                    let Some(col) = basis else { continue };
                    // E = pref [k0^2 g I t_hat + grad g I'], tested with dV
                    let amp = sh[end] * wq;
                    let damp = slope[end] * wq;
                    for p in 0..3 {
                        let e_val = pref * (g * (k2 * amp) * dir[p] + gp * rhat[p] * damp) * dv;
                        zcb_full.add_to(p * n_v + v, col, e_val);
                    }
                    // H = grad g x t_hat I, tested with dV
                    let cross = [
                        rhat[1] * dir[2] - rhat[2] * dir[1],
                        rhat[2] * dir[0] - rhat[0] * dir[2],
                        rhat[0] * dir[1] - rhat[1] * dir[0],
                    ];
                    for p in 0..3 {
                        let h_val = gp * cross[p] * amp * dv;
                        kcb_full.add_to(p * n_v + v, col, h_val);
                    }
                }
            }
        }
    }

    // masked copies
    let mut zcb = DenseMatrix::zeros(3 * n_m, m);
    let mut kcb = DenseMatrix::zeros(3 * n_m, m);
    for (mi, &lin) in mask_index.voxels().iter().enumerate() {
        for p in 0..3 {
            for c in 0..m {
                zcb.set(p * n_m + mi, c, zcb_full.get(p * n_v + lin, c));
                kcb.set(p * n_m + mi, c, kcb_full.get(p * n_v + lin, c));
            }
        }
    }

    let zcc = assemble_zcc_with_order(coil, k0 * c0::<T>(), order)?;
    Ok(CouplingOperators {
        zcb,
        kcb,
        zcc,
        zcb_full,
        kcb_full,
    })
}

/// Incident fields on the whole grid from given coil basis coefficients:
/// Galerkin-tested (e_inc, h_inc) = (Zcb j_c, Kcb j_c).
pub fn incident_fields<T: Real>(
    coupling: &CouplingOperators<T>,
    grid: &VoxelGrid<T>,
    j_c: &[Cplx<T>],
) -> Result<(VecField<T>, VecField<T>)> {
    if j_c.len() != coupling.zcb_full.cols() {
        return Err(Error::invalid("coil coefficient vector length mismatch"));
    }
    let n = grid.len();
    if coupling.zcb_full.rows() != 3 * n {
        return Err(Error::invalid("coupling grid mismatch"));
    }
    let e = coupling.zcb_full.matvec(j_c);
    let h = coupling.kcb_full.matvec(j_c);
    let mut e_inc = VecField::zeros(grid.clone());
    let mut h_inc = VecField::zeros(grid.clone());
    e_inc.raw_mut().copy_from_slice(&e);
    h_inc.raw_mut().copy_from_slice(&h);
    Ok((e_inc, h_inc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopShape {
    Circle,
    Rectangle,
}

/// Series lumped element replicated on every loop, keyed by node offset
/// within the loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopLumped<T> {
    pub node_offset: usize,
    pub impedance: Cplx<T>,
}

/// Loop-array builder parameters: `channels` loops on a cylindrical former
/// (axis z) centered at `center`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopArraySpec<T> {
    pub channels: usize,
    pub shape: LoopShape,
    pub former_radius: T,
    pub former_length: T,
    pub segments_per_loop: usize,
    pub wire_radius: T,
    pub center: [T; 3],
    pub lumped: Vec<LoopLumped<T>>,
    pub drive_voltage: T,
}

/// Deterministic loop array on a cylindrical former. Up to four channels sit
/// on one ring at the former mid-plane; more channels split into two rings
/// offset by half the azimuthal spacing, giving longitudinal field variation.
pub fn make_loop_array<T: Real>(spec: &LoopArraySpec<T>) -> Result<WireCoil<T>> {
    let nc = spec.channels;
    if nc == 0 {
        return Err(Error::invalid("at least one channel required"));
    }
    let s_per = spec.segments_per_loop;
    match spec.shape {
        LoopShape::Circle => {
            if s_per < 3 {
                return Err(Error::invalid("circular loops need >= 3 segments"));
            }
        }
        LoopShape::Rectangle => {
            if s_per < 4 || s_per % 4 != 0 {
                return Err(Error::invalid("rectangular loops need a multiple of 4 segments"));
            }
        }
    }
    if !(spec.former_radius > T::zero() && spec.former_length > T::zero()) {
        return Err(Error::invalid("former dimensions must be positive"));
    }

    let two = T::one() + T::one();
    let rings: usize = if nc <= 4 { 1 } else { 2 };
    let per_ring = nc.div_ceil(rings);
    let angular_limit =
        spec.former_radius * (T::PI() / T::from_usize(per_ring).unwrap()).sin();
    let axial_limit = if rings == 1 {
        spec.former_length / two
    } else {
        spec.former_length / real::<T>(4.0)
    };
    let loop_radius = real::<T>(0.9)
        * if per_ring == 1 {
            axial_limit
        } else {
            angular_limit.min(axial_limit)
        };
    if !(loop_radius > spec.wire_radius * real::<T>(4.0)) {
        return Err(Error::invalid(
            "former too crowded: loop radius not much larger than the wire radius",
        ));
    }

    let mut nodes: Vec<[T; 3]> = Vec::with_capacity(nc * s_per);
    let mut segments = Vec::with_capacity(nc * s_per);

    for c in 0..nc {
        let ring = c % rings;
        let idx_in_ring = c / rings;
        let n_in_ring = (nc - ring).div_ceil(rings);
        let half_offset = if ring == 1 {
            T::PI() / T::from_usize(n_in_ring).unwrap()
        } else {
            T::zero()
        };
        let phi = two * T::PI() * T::from_usize(idx_in_ring).unwrap()
            / T::from_usize(n_in_ring).unwrap()
            + half_offset;
        let z_ring = if rings == 1 {
            T::zero()
        } else if ring == 0 {
            -spec.former_length / real::<T>(4.0)
        } else {
            spec.former_length / real::<T>(4.0)
        };
        let u_r = [phi.cos(), phi.sin(), T::zero()];
        let u_t = [-phi.sin(), phi.cos(), T::zero()];
        let loop_center = [
            spec.center[0] + spec.former_radius * u_r[0],
            spec.center[1] + spec.former_radius * u_r[1],
            spec.center[2] + z_ring,
        ];
        let base = nodes.len();
        match spec.shape {
            LoopShape::Circle => {
                for s in 0..s_per {
                    let alpha = two * T::PI() * T::from_usize(s).unwrap()
                        / T::from_usize(s_per).unwrap();
                    let (ca, sa) = (alpha.cos(), alpha.sin());
                    nodes.push([
                        loop_center[0] + loop_radius * (sa * u_t[0]),
                        loop_center[1] + loop_radius * (sa * u_t[1]),
                        loop_center[2] + loop_radius * ca,
                    ]);
                }
            }
            LoopShape::Rectangle => {
                // square of half-side loop_radius in the (u_t, z) plane
                let q = s_per / 4;
                let h = loop_radius;
                for side in 0..4 {
                    for s in 0..q {
                        let f = T::from_usize(s).unwrap() / T::from_usize(q).unwrap();
                        let (t, zz) = match side {
                            0 => (-h + two * h * f, -h),
                            1 => (h, -h + two * h * f),
                            2 => (h - two * h * f, h),
                            _ => (-h, h - two * h * f),
                        };
                        nodes.push([
                            loop_center[0] + t * u_t[0],
                            loop_center[1] + t * u_t[1],
                            loop_center[2] + zz,
                        ]);
                    }
                }
            }
        }
        for s in 0..s_per {
            segments.push(Segment {
                a: base + s,
                b: base + (s + 1) % s_per,
            });
        }
    }

    let mut coil = WireCoil::new(nodes, segments, spec.wire_radius)?;
    // closed loops: basis index equals node index
    for c in 0..nc {
        let base = c * s_per;
        coil.add_port(base, Cplx::new(spec.drive_voltage, T::zero()), c)?;
        for l in &spec.lumped {
            coil.add_lumped(base + (l.node_offset % s_per), l.impedance)?;
        }
    }
    Ok(coil)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::C0_F64;

    fn single_loop(segments: usize, radius: f64) -> WireCoil<f64> {
        let spec = LoopArraySpec {
            channels: 1,
            shape: LoopShape::Circle,
            former_radius: radius,
            former_length: 4.0 * radius,
            segments_per_loop: segments,
            wire_radius: 1e-3,
            center: [0.0; 3],
            lumped: vec![],
            drive_voltage: 1.0,
        };
        make_loop_array(&spec).unwrap()
    }

    #[test]
    fn closed_loop_counting() {
        let coil = single_loop(12, 0.05);
        assert_eq!(coil.nodes.len(), 12);
        assert_eq!(coil.segments.len(), 12);
        assert_eq!(coil.basis_count(), 12);
        assert_eq!(coil.channel_count(), 1);
    }

    #[test]
    fn eight_loops_by_sixteen_segments() {
        let spec = LoopArraySpec {
            channels: 8,
            shape: LoopShape::Circle,
            former_radius: 0.1,
            former_length: 0.2,
            segments_per_loop: 16,
            wire_radius: 5e-4,
            center: [0.0; 3],
            lumped: vec![],
            drive_voltage: 1.0,
        };
        let coil = make_loop_array(&spec).unwrap();
        assert_eq!(coil.basis_count(), 128);
        assert_eq!(coil.channel_count(), 8);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = single_loop(10, 0.03);
        let b = single_loop(10, 0.03);
        assert_eq!(a.nodes, b.nodes);
    }

    #[test]
    fn port_vector_single_entry() {
        let coil = single_loop(8, 0.04);
        let v = coil.port_vector(0).unwrap();
        assert_eq!(v.iter().filter(|c| c.norm() > 0.0).count(), 1);
        assert_eq!(v[0], Cplx::new(1.0, 0.0));
    }

    #[test]
    fn zcc_symmetric_and_circulant_for_symmetric_loop() {
        let coil = single_loop(16, 0.05);
        let omega = 2.0 * std::f64::consts::PI * 297.2e6;
        let z = assemble_zcc(&coil, omega).unwrap();
        assert!(z.symmetry_defect() < 1e-10);
        // rotational symmetry: entries depend on index difference only
        let m = 16;
        let mut max_rel: f64 = 0.0;
        for i in 0..m {
            for j in 0..m {
                let a = z.get(i, j);
                let b = z.get((i + 1) % m, (j + 1) % m);
                max_rel = max_rel.max((a - b).norm() / a.norm());
            }
        }
        assert!(max_rel < 1e-9, "circulant defect {max_rel}");
    }

    #[test]
    fn capacitor_shifts_only_its_diagonal_entry() {
        let mut coil = single_loop(12, 0.05);
        let omega = 2.0 * std::f64::consts::PI * 297.2e6;
        let z0 = assemble_zcc(&coil, omega).unwrap();
        let c = 10e-12; // 10 pF
        let zc = Cplx::new(0.0, -1.0 / (omega * c));
        coil.add_lumped(5, zc).unwrap();
        let z1 = assemble_zcc(&coil, omega).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let d = z1.get(i, j) - z0.get(i, j);
                if i == 5 && j == 5 {
                    assert!((d - zc).norm() < 1e-12 * zc.norm());
                } else {
                    assert_eq!(d, Cplx::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn driven_loop_has_positive_input_resistance() {
        // Radiation resistance comes from the smooth Im(g) part, so the
        // quadrature resolves it to good relative accuracy. For the
        // electrically small loop it approaches 20 pi^2 (C/lambda)^4.
        let coil = single_loop(12, 0.01); // loop radius 0.018 m, C/lambda 0.11
        let omega = 2.0 * std::f64::consts::PI * 297.2e6;
        let z = assemble_zcc(&coil, omega).unwrap();
        let lu = LuFactor::factor(&z).unwrap();
        let v = coil.port_vector(0).unwrap();
        let i = lu.solve(&v);
        let z_in = Cplx::new(1.0, 0.0) / i[0];
        assert!(z_in.re > 0.0, "input impedance {z_in}");
        // small loop: inductive reactance dominates
        assert!(z_in.im > 0.0);
        let lambda = 2.0 * std::f64::consts::PI * C0_F64 / omega;
        let c_over_lambda = 2.0 * std::f64::consts::PI * 0.018 / lambda;
        let r_rad = 20.0 * std::f64::consts::PI.powi(2) * c_over_lambda.powi(4);
        assert!(
            (z_in.re - r_rad).abs() < 0.15 * r_rad,
            "R_in {} vs small-loop radiation resistance {}",
            z_in.re,
            r_rad
        );

        // above the half-wave self-resonance the reactance flips sign but
        // passivity must survive
        let big = single_loop(24, 0.05);
        let zb = assemble_zcc(&big, omega).unwrap();
        let ib = LuFactor::factor(&zb).unwrap().solve(&big.port_vector(0).unwrap());
        assert!((Cplx::new(1.0, 0.0) / ib[0]).re > 0.0);
    }

    /// Analytic H field of a straight segment carrying constant current 1
    /// from a to b (Biot-Savart closed form).
    fn segment_h_static(a: [f64; 3], b: [f64; 3], r: [f64; 3]) -> [f64; 3] {
        let t = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let len = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
        let t = [t[0] / len, t[1] / len, t[2] / len];
        let ra = [r[0] - a[0], r[1] - a[1], r[2] - a[2]];
        let l1 = ra[0] * t[0] + ra[1] * t[1] + ra[2] * t[2];
        let l2 = l1 - len;
        let rho = [ra[0] - l1 * t[0], ra[1] - l1 * t[1], ra[2] - l1 * t[2]];
        let d = (rho[0] * rho[0] + rho[1] * rho[1] + rho[2] * rho[2]).sqrt();
        let mag = (l1 / (l1 * l1 + d * d).sqrt() - l2 / (l2 * l2 + d * d).sqrt())
            / (4.0 * std::f64::consts::PI * d);
        let rho_hat = [rho[0] / d, rho[1] / d, rho[2] / d];
        let dir = [
            t[1] * rho_hat[2] - t[2] * rho_hat[1],
            t[2] * rho_hat[0] - t[0] * rho_hat[2],
            t[0] * rho_hat[1] - t[1] * rho_hat[0],
        ];
        [mag * dir[0], mag * dir[1], mag * dir[2]]
    }

    #[test]
    fn static_kcb_matches_biot_savart_segments() {
        // All-ones coefficients make the loop current uniform, so each
        // segment carries constant unit current and the analytic per-segment
        // Biot-Savart formula applies.
        let coil = single_loop(12, 0.02);
        let grid = VoxelGrid::<f64>::new([2, 2, 2], 0.005, [0.05, 0.03, 0.04]).unwrap();
        let mask = vec![true; grid.len()];
        let k0 = 1e-8; // static limit
        let cpl = assemble_coupling_with_order(&coil, &grid, &mask, k0, 8).unwrap();
        let ones = vec![Cplx::new(1.0, 0.0); coil.basis_count()];
        let h = cpl.kcb_full.matvec(&ones);
        let dv = grid.voxel_volume();
        for v in 0..grid.len() {
            let rv = grid.center_lin(v);
            let mut expected = [0.0; 3];
            for s in &coil.segments {
                let hs = segment_h_static(coil.nodes[s.a], coil.nodes[s.b], rv);
                for p in 0..3 {
                    expected[p] += hs[p];
                }
            }
            for p in 0..3 {
                let got = h[p * grid.len() + v] / dv; // tested -> field units
                let scale = (expected[0].powi(2) + expected[1].powi(2) + expected[2].powi(2)).sqrt();
                assert!(
                    (got.re - expected[p]).abs() < 1e-6 * scale,
                    "component {p} voxel {v}: got {} expected {}",
                    got.re,
                    expected[p]
                );
            }
        }
    }

    #[test]
    fn dc_loop_on_axis_field_within_one_percent() {
        let coil = single_loop(64, 0.03);
        // observation points on the loop axis: the loop normal is u_r of
        // phi = 0, i.e. the x axis; loop center sits at (former_radius, 0, 0)
        let r_loop = {
            // recover generated loop radius from node coordinates
            let c = [0.03, 0.0, 0.0];
            dist(coil.nodes[0], c)
        };
        let grid = VoxelGrid::<f64>::new([3, 1, 1], 0.01, [0.06, -0.005, -0.005]).unwrap();
        let mask = vec![true; grid.len()];
        let cpl = assemble_coupling_with_order(&coil, &grid, &mask, 1e-8, 6).unwrap();
        let ones = vec![Cplx::new(1.0, 0.0); coil.basis_count()];
        let h = cpl.kcb_full.matvec(&ones);
        let dv = grid.voxel_volume();
        for v in 0..grid.len() {
            let rv = grid.center_lin(v);
            let z = rv[0] - 0.03; // distance along the loop axis
            let analytic = r_loop * r_loop / (2.0 * (r_loop * r_loop + z * z).powf(1.5));
            let got = (h[v] / dv).re.abs(); // x component is axial
            assert!(
                (got - analytic).abs() < 0.01 * analytic,
                "axis point {v}: got {got} analytic {analytic}"
            );
        }
    }

    #[test]
    fn zcb_far_rows_decay_as_inverse_distance() {
        // Radiation-zone scaling fit: for voxels many wavelengths from the
        // coil the tested E rows fall off as 1/r. (At strictly zero
        // frequency a neutral current loop is a dipole with 1/r^2 decay, so
        // the far-field law is probed at the operating k0.)
        let coil = single_loop(12, 0.02);
        let k0 = 6.229; // 297.2 MHz
        let ones = vec![Cplx::new(1.0, 0.0); coil.basis_count()];
        let mag_at = |z: f64| {
            let grid = VoxelGrid::<f64>::new([1, 1, 1], 0.01, [-0.005, -0.005, z - 0.005]).unwrap();
            let cpl = assemble_coupling(&coil, &grid, &vec![true], k0).unwrap();
            let e = cpl.zcb_full.matvec(&ones);
            (e[0].norm_sqr() + e[1].norm_sqr() + e[2].norm_sqr()).sqrt()
        };
        let (r0, r1, r2) = (4.0, 8.0, 16.0);
        let (m0, m1, m2) = (mag_at(r0), mag_at(r1), mag_at(r2));
        let s01 = (m1 / m0).ln() / (r1 / r0).ln();
        let s12 = (m2 / m1).ln() / (r2 / r1).ln();
        assert!((s01 + 1.0).abs() < 0.1, "slope {s01}");
        assert!((s12 + 1.0).abs() < 0.05, "slope {s12}");
    }

    #[test]
    fn coupling_linear_in_coefficients() {
        let coil = single_loop(8, 0.02);
        let grid = VoxelGrid::<f64>::new([2, 1, 1], 0.01, [0.05, 0.0, 0.0]).unwrap();
        let mask = vec![true; grid.len()];
        let cpl = assemble_coupling(&coil, &grid, &mask, 6.229).unwrap();
        let mut c1 = vec![Cplx::new(0.0, 0.0); 8];
        c1[3] = Cplx::new(1.0, 0.5);
        let c2: Vec<_> = c1.iter().map(|&v| v * Cplx::new(2.0, 0.0)).collect();
        let e1 = cpl.zcb.matvec(&c1);
        let e2 = cpl.zcb.matvec(&c2);
        for i in 0..e1.len() {
            assert!((e2[i] - e1[i] * Cplx::new(2.0, 0.0)).norm() < 1e-14 * e1[i].norm().max(1e-30));
        }
    }

    #[test]
    fn incident_fields_zero_and_superposition() {
        let coil = {
            let spec = LoopArraySpec {
                channels: 2,
                shape: LoopShape::Circle,
                former_radius: 0.05,
                former_length: 0.1,
                segments_per_loop: 8,
                wire_radius: 5e-4,
                center: [0.0; 3],
                lumped: vec![],
                drive_voltage: 1.0,
            };
            make_loop_array(&spec).unwrap()
        };
        let grid = VoxelGrid::<f64>::centered([2, 2, 2], 0.01).unwrap();
        let mask = vec![true; grid.len()];
        let cpl = assemble_coupling(&coil, &grid, &mask, 6.229).unwrap();
        let m = coil.basis_count();
        let zeros = vec![Cplx::new(0.0, 0.0); m];
        let (e0, h0) = incident_fields(&cpl, &grid, &zeros).unwrap();
        assert!(e0.raw().iter().all(|c| c.norm() == 0.0));
        assert!(h0.raw().iter().all(|c| c.norm() == 0.0));

        let mut ca = zeros.clone();
        ca[1] = Cplx::new(1.0, -0.2);
        let mut cb = zeros.clone();
        cb[9] = Cplx::new(0.3, 0.7);
        let sum: Vec<_> = ca.iter().zip(&cb).map(|(&a, &b)| a + b).collect();
        let (ea, _) = incident_fields(&cpl, &grid, &ca).unwrap();
        let (eb, _) = incident_fields(&cpl, &grid, &cb).unwrap();
        let (es, _) = incident_fields(&cpl, &grid, &sum).unwrap();
        for i in 0..es.raw().len() {
            let rhs = ea.raw()[i] + eb.raw()[i];
            assert!((es.raw()[i] - rhs).norm() < 1e-14 * rhs.norm().max(1e-30));
        }
    }

    #[test]
    fn coil_inside_mask_rejected() {
        let coil = single_loop(8, 0.01);
        // grid covering the coil with everything masked
        let grid = VoxelGrid::<f64>::centered([10, 10, 10], 0.01).unwrap();
        let mask = vec![true; grid.len()];
        assert!(assemble_coupling(&coil, &grid, &mask, 6.229).is_err());
    }

    #[test]
    fn doubling_quadrature_changes_coupling_below_tenth_percent() {
        let coil = single_loop(12, 0.02);
        let grid = VoxelGrid::<f64>::new([2, 2, 1], 0.005, [0.04, 0.01, -0.0025]).unwrap();
        let mask = vec![true; grid.len()];
        let c4 = assemble_coupling_with_order(&coil, &grid, &mask, 6.229, 4).unwrap();
        let c8 = assemble_coupling_with_order(&coil, &grid, &mask, 6.229, 8).unwrap();
        let mut max_rel: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for r in 0..c4.zcb.rows() {
            for c in 0..c4.zcb.cols() {
                scale = scale.max(c4.zcb.get(r, c).norm());
            }
        }
        for r in 0..c4.zcb.rows() {
            for c in 0..c4.zcb.cols() {
                let d = (c4.zcb.get(r, c) - c8.zcb.get(r, c)).norm();
                max_rel = max_rel.max(d / scale);
            }
        }
        assert!(max_rel < 1e-3, "quadrature sensitivity {max_rel}");
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre::<f64>(4);
        // integral of t^6 over [0,1] is 1/7; order 4 is exact through degree 7
        let s: f64 = x.iter().zip(&w).map(|(&t, &wi)| wi * t.powi(6)).sum();
        assert!((s - 1.0 / 7.0).abs() < 1e-14);
        let _ = C0_F64;
    }
}
