//! Reconstruction quality metrics: peak normalized absolute error, 3-D
//! structural similarity, and coil-current error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::VoxelGrid;
use crate::phantom::PhantomSpec;
use crate::scalar::{real, Cplx, Real};

/// Peak normalized absolute error |y - x| / max_mask(x): the voxelwise
/// field (zero outside the mask), its mean, and its max over the mask.
pub fn pnae<T: Real>(truth: &[T], recon: &[T], mask: &[bool]) -> Result<(Vec<T>, T, T)> {
    if truth.len() != recon.len() || truth.len() != mask.len() {
        return Err(Error::invalid("field lengths must match"));
    }
    let peak = truth
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x.abs())
        .fold(T::zero(), |a, b| a.max(b));
    if peak == T::zero() {
        return Err(Error::invalid("truth peak over the mask is zero"));
    }
    let mut field = vec![T::zero(); truth.len()];
    let mut sum = T::zero();
    let mut max = T::zero();
    let mut count = 0usize;
    for v in 0..truth.len() {
        if mask[v] {
            let e = (recon[v] - truth[v]).abs() / peak;
            field[v] = e;
            sum += e;
            max = max.max(e);
            count += 1;
        }
    }
    Ok((field, sum / T::from_usize(count).unwrap(), max))
}

/// Relative L2 coil current error ||j - j_ref|| / ||j_ref||.
pub fn coil_current_error<T: Real>(j: &[Cplx<T>], j_ref: &[Cplx<T>]) -> Result<T> {
    if j.len() != j_ref.len() {
        return Err(Error::invalid("coefficient vectors must have equal length"));
    }
    let mut num = T::zero();
    let mut den = T::zero();
    for (a, b) in j.iter().zip(j_ref) {
        num += (*a - *b).norm_sqr();
        den += b.norm_sqr();
    }
    if den == T::zero() {
        return Err(Error::invalid("reference currents are zero"));
    }
    Ok((num / den).sqrt())
}

const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_taps<T: Real>() -> [T; SSIM_WINDOW] {
    let mut taps = [T::zero(); SSIM_WINDOW];
    let mut sum = 0.0f64;
    let mut raw = [0.0f64; SSIM_WINDOW];
    for (i, r) in raw.iter_mut().enumerate() {
        let d = i as f64 - (SSIM_WINDOW as f64 - 1.0) / 2.0;
        *r = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *r;
    }
    for i in 0..SSIM_WINDOW {
        taps[i] = real::<T>(raw[i] / sum);
    }
    taps
}

/// Separable Gaussian filtering along one axis; only used at positions where
/// the full window fits, so zero padding never leaks into evaluated centers.
fn blur_axis<T: Real>(grid: &VoxelGrid<T>, src: &[T], axis: usize, taps: &[T; SSIM_WINDOW]) -> Vec<T> {
    let [nx, ny, nz] = grid.dims();
    let dims = [nx, ny, nz];
    let half = SSIM_WINDOW / 2;
    let mut out = vec![T::zero(); src.len()];
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let pos = [i, j, k];
                let lin = grid.linear(i, j, k);
                if pos[axis] < half || pos[axis] + half >= dims[axis] {
                    continue;
                }
                let mut acc = T::zero();
                for t in 0..SSIM_WINDOW {
                    let off = (pos[axis] + t - half) as isize - pos[axis] as isize;
                    let idx = (lin as isize + off * stride as isize) as usize;
                    acc += taps[t] * src[idx];
                }
                out[lin] = acc;
            }
        }
    }
    out
}

fn blur3<T: Real>(grid: &VoxelGrid<T>, src: &[T], taps: &[T; SSIM_WINDOW]) -> Vec<T> {
    let a = blur_axis(grid, src, 0, taps);
    let b = blur_axis(grid, &a, 1, taps);
    blur_axis(grid, &b, 2, taps)
}

/// 3-D SSIM with a 7^3 Gaussian window (sigma 1.5), C1 = (0.01 L)^2,
/// C2 = (0.03 L)^2, L = max of truth over the mask; averaged over masked
/// window centers whose window fits inside the grid.
pub fn ssim3d<T: Real>(
    grid: &VoxelGrid<T>,
    truth: &[T],
    recon: &[T],
    mask: &[bool],
) -> Result<T> {
    let n = grid.len();
    if truth.len() != n || recon.len() != n || mask.len() != n {
        return Err(Error::invalid("field lengths must match the grid"));
    }
    let l_range = truth
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x.abs())
        .fold(T::zero(), |a, b| a.max(b));
    if l_range == T::zero() {
        return Err(Error::invalid("empty mask or zero truth"));
    }
    let c1 = (real::<T>(0.01) * l_range).powi(2);
    let c2 = (real::<T>(0.03) * l_range).powi(2);
    let taps = gaussian_taps::<T>();

    let xx: Vec<T> = truth.iter().map(|&a| a * a).collect();
    let yy: Vec<T> = recon.iter().map(|&a| a * a).collect();
    let xy: Vec<T> = truth.iter().zip(recon).map(|(&a, &b)| a * b).collect();
    let mu_x = blur3(grid, truth, &taps);
    let mu_y = blur3(grid, recon, &taps);
    let m_xx = blur3(grid, &xx, &taps);
    let m_yy = blur3(grid, &yy, &taps);
    let m_xy = blur3(grid, &xy, &taps);

    let [nx, ny, nz] = grid.dims();
    let half = SSIM_WINDOW / 2;
    let mut sum = T::zero();
    let mut count = 0usize;
    for k in half..nz.saturating_sub(half) {
        for j in half..ny.saturating_sub(half) {
            for i in half..nx.saturating_sub(half) {
                let lin = grid.linear(i, j, k);
                if !mask[lin] {
                    continue;
                }
                let ux = mu_x[lin];
                let uy = mu_y[lin];
                let var_x = m_xx[lin] - ux * ux;
                let var_y = m_yy[lin] - uy * uy;
                let cov = m_xy[lin] - ux * uy;
                let two = T::one() + T::one();
                let val = ((two * ux * uy + c1) * (two * cov + c2))
                    / ((ux * ux + uy * uy + c1) * (var_x + var_y + c2));
                sum += val;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid(
            "mask has no window centers with full 7^3 support; grid or mask too small",
        ));
    }
    Ok(sum / T::from_usize(count).unwrap())
}

/// Per-compartment statistics of a reconstructed field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompartmentStats {
    pub compartment: usize,
    pub voxels: usize,
    pub mean: f64,
    pub std: f64,
}

/// Quantitative evaluation report (f64, serialized as JSON by the CLI).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub mean_pnae_eps_r: f64,
    pub max_pnae_eps_r: f64,
    pub mean_pnae_sigma: f64,
    pub max_pnae_sigma: f64,
    pub ssim_eps_r: Option<f64>,
    pub ssim_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_compartment_eps_r: Vec<CompartmentStats>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_compartment_sigma: Vec<CompartmentStats>,
}

/// Compartment label of a point under a phantom spec (innermost wins):
/// 0 is the single/outer compartment or the outermost layer.
pub fn compartment_of<T: Real>(spec: &PhantomSpec<T>, p: [T; 3]) -> Option<usize> {
    let half = |l: T| l / (T::one() + T::one());
    match spec {
        PhantomSpec::Cylinder {
            center,
            radius,
            length,
            ..
        } => {
            let dx = p[0] - center[0];
            let dy = p[1] - center[1];
            let dz = (p[2] - center[2]).abs();
            (dx * dx + dy * dy <= *radius * *radius && dz <= half(*length)).then_some(0)
        }
        PhantomSpec::TwoCompartmentCylinder {
            center,
            outer_radius,
            length,
            inner_offset,
            inner_radius,
            ..
        } => {
            let dz = (p[2] - center[2]).abs();
            if dz > half(*length) {
                return None;
            }
            let dxi = p[0] - center[0] - inner_offset[0];
            let dyi = p[1] - center[1] - inner_offset[1];
            if dxi * dxi + dyi * dyi <= *inner_radius * *inner_radius {
                return Some(1);
            }
            let dx = p[0] - center[0];
            let dy = p[1] - center[1];
            (dx * dx + dy * dy <= *outer_radius * *outer_radius).then_some(0)
        }
        PhantomSpec::LayeredSphere { center, layers } => {
            let dx = p[0] - center[0];
            let dy = p[1] - center[1];
            let dz = p[2] - center[2];
            let r2 = dx * dx + dy * dy + dz * dz;
            let mut label = None;
            for (i, l) in layers.iter().enumerate() {
                if r2 <= l.radius * l.radius {
                    label = Some(i);
                }
            }
            label
        }
    }
}

/// Mean and std of a field within each compartment of a phantom spec.
pub fn per_compartment_stats<T: Real>(
    spec: &PhantomSpec<T>,
    grid: &VoxelGrid<T>,
    field: &[T],
) -> Vec<CompartmentStats> {
    use std::collections::BTreeMap;
    let mut acc: BTreeMap<usize, (usize, f64, f64)> = BTreeMap::new();
    for (idx, lin) in grid.iter_indices() {
        let c = grid.center(idx[0], idx[1], idx[2]);
        if let Some(label) = compartment_of(spec, c) {
            let v = field[lin].to_f64().unwrap_or(f64::NAN);
            let e = acc.entry(label).or_insert((0, 0.0, 0.0));
            e.0 += 1;
            e.1 += v;
            e.2 += v * v;
        }
    }
    acc.into_iter()
        .map(|(label, (n, s, s2))| {
            let mean = s / n as f64;
            let var = (s2 / n as f64 - mean * mean).max(0.0);
            CompartmentStats {
                compartment: label,
                voxels: n,
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnae_identities_and_hand_example() {
        let mask = vec![true; 3];
        let x: Vec<f64> = vec![1.0, 2.0, 4.0];
        let (f, mean, max) = pnae(&x, &x, &mask).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
        assert_eq!(mean, 0.0);
        assert_eq!(max, 0.0);

        let y = vec![1.0, 3.0, 4.0];
        let (f, mean, max) = pnae(&x, &y, &mask).unwrap();
        assert_eq!(f, vec![0.0, 0.25, 0.0]);
        assert!((mean - 1.0 / 12.0).abs() < 1e-15);
        assert_eq!(max, 0.25);
    }

    #[test]
    fn pnae_scale_covariant_and_zero_peak_rejected() {
        let mask = vec![true; 4];
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let y = vec![1.1, 1.9, 3.4, 3.6];
        let (_, m1, _) = pnae(&x, &y, &mask).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * 7.3).collect();
        let ys: Vec<f64> = y.iter().map(|v| v * 7.3).collect();
        let (_, m2, _) = pnae(&xs, &ys, &mask).unwrap();
        assert!((m1 - m2).abs() < 1e-15);
        assert!(pnae(&[0.0], &[1.0], &[true]).is_err());
    }

    #[test]
    fn coil_error_identities() {
        let j: Vec<Cplx<f64>> = (0..5).map(|i| Cplx::new(i as f64 + 1.0, -0.3)).collect();
        assert_eq!(coil_current_error(&j, &j).unwrap(), 0.0);
        let j2: Vec<Cplx<f64>> = j.iter().map(|&c| c * 2.0).collect();
        assert!((coil_current_error(&j2, &j).unwrap() - 1.0).abs() < 1e-15);
        // simultaneous unitary scaling leaves the error fixed
        let rot = Cplx::from_polar(1.0, 1.1);
        let a: Vec<Cplx<f64>> = j2.iter().map(|&c| c * rot).collect();
        let b: Vec<Cplx<f64>> = j.iter().map(|&c| c * rot).collect();
        assert!((coil_current_error(&a, &b).unwrap() - 1.0).abs() < 1e-14);
        let zeros = vec![Cplx::new(0.0, 0.0); 5];
        assert!(coil_current_error(&j, &zeros).is_err());
    }

    fn rand_field(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed | 1;
        (0..n)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                1.0 + (state as f64 / u64::MAX as f64) * 4.0
            })
            .collect()
    }

    #[test]
    fn ssim_identity_is_one() {
        let grid = VoxelGrid::<f64>::centered([9, 9, 9], 0.005).unwrap();
        let x = rand_field(grid.len(), 3);
        let mask = vec![true; grid.len()];
        let s = ssim3d(&grid, &x, &x, &mask).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_penalizes_structure_mismatch() {
        let grid = VoxelGrid::<f64>::centered([9, 9, 9], 0.005).unwrap();
        let x = rand_field(grid.len(), 5);
        let c = vec![2.5; grid.len()];
        let mask = vec![true; grid.len()];
        let s = ssim3d(&grid, &x, &c, &mask).unwrap();
        assert!(s < 1.0);
    }

    #[test]
    fn ssim_mask_smaller_than_window_rejected() {
        let grid = VoxelGrid::<f64>::centered([5, 5, 5], 0.005).unwrap();
        let x = rand_field(grid.len(), 7);
        let mask = vec![true; grid.len()];
        assert!(ssim3d(&grid, &x, &x, &mask).is_err());
    }

    /// Direct windowed-sum SSIM, independent of the separable-blur path.
    fn ssim_direct(grid: &VoxelGrid<f64>, x: &[f64], y: &[f64], mask: &[bool]) -> f64 {
        let taps = gaussian_taps::<f64>();
        let [nx, ny, nz] = grid.dims();
        let half = SSIM_WINDOW / 2;
        let peak = x
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v.abs())
            .fold(0.0f64, f64::max);
        let c1 = (0.01 * peak).powi(2);
        let c2 = (0.03 * peak).powi(2);
        let mut sum = 0.0;
        let mut count = 0;
        for k in half..nz - half {
            for j in half..ny - half {
                for i in half..nx - half {
                    if !mask[grid.linear(i, j, k)] {
                        continue;
                    }
                    let mut w_sum = 0.0;
                    let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dk in 0..SSIM_WINDOW {
                        for dj in 0..SSIM_WINDOW {
                            for di in 0..SSIM_WINDOW {
                                let w = taps[di] * taps[dj] * taps[dk];
                                let lin = grid.linear(i + di - half, j + dj - half, k + dk - half);
                                mx += w * x[lin];
                                my += w * y[lin];
                                mxx += w * x[lin] * x[lin];
                                myy += w * y[lin] * y[lin];
                                mxy += w * x[lin] * y[lin];
                                w_sum += w;
                            }
                        }
                    }
                    assert!((w_sum - 1.0).abs() < 1e-12);
                    let var_x = mxx - mx * mx;
                    let var_y = myy - my * my;
                    let cov = mxy - mx * my;
                    sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
                    count += 1;
                }
            }
        }
        sum / count as f64
    }

    #[test]
    fn ssim_matches_direct_summation_oracle() {
        let grid = VoxelGrid::<f64>::centered([8, 8, 8], 0.005).unwrap();
        let x = rand_field(grid.len(), 11);
        let y = rand_field(grid.len(), 12);
        let mask = vec![true; grid.len()];
        let fast = ssim3d(&grid, &x, &y, &mask).unwrap();
        let direct = ssim_direct(&grid, &x, &y, &mask);
        assert!((fast - direct).abs() < 1e-10, "fast {fast} direct {direct}");
    }

    #[test]
    fn compartment_labels_two_compartment() {
        use crate::phantom::CompartmentEp;
        let spec = PhantomSpec::TwoCompartmentCylinder {
            center: [0.0; 3],
            outer_radius: 0.05,
            length: 0.1,
            inner_offset: [0.01, 0.0],
            inner_radius: 0.02,
            outer: CompartmentEp {
                eps_r: 59.0,
                sigma_e: 0.7,
            },
            inner: CompartmentEp {
                eps_r: 75.0,
                sigma_e: 1.87,
            },
        };
        assert_eq!(compartment_of(&spec, [0.01, 0.0, 0.0]), Some(1));
        assert_eq!(compartment_of(&spec, [0.04, 0.0, 0.0]), Some(0));
        assert_eq!(compartment_of(&spec, [0.06, 0.0, 0.0]), None);
        assert_eq!(compartment_of(&spec, [0.0, 0.0, 0.06]), None);
    }
}
