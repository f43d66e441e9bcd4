//! Smoothed isotropic total-variation regularizer on the masked voxel set.
//!
//! f_r = sum_v sqrt(|grad eps_r|^2 + |grad (sigma/sigma_max)|^2 + beta^2)
//! with forward differences taken only between pairs of masked voxels, so
//! the value is independent of anything outside the mask.

use crate::grid::{MaskIndex, VoxelGrid};
use crate::scalar::{real, Real};

pub const TV_SMOOTHING: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct TvResult<T> {
    pub value: T,
    /// d f_r / d eps_r per masked voxel.
    pub grad_eps: Vec<T>,
    /// d f_r / d sigma per masked voxel.
    pub grad_sigma: Vec<T>,
}

/// Evaluate the regularizer and its analytic gradient on masked-voxel
/// vectors (same indexing as the optimizer unknowns).
pub fn smoothed_tv<T: Real>(
    grid: &VoxelGrid<T>,
    mask_index: &MaskIndex,
    eps_r: &[T],
    sigma: &[T],
    sigma_max: T,
) -> TvResult<T> {
    let n = mask_index.count();
    assert_eq!(eps_r.len(), n);
    assert_eq!(sigma.len(), n);
    let beta = real::<T>(TV_SMOOTHING);
    let inv_smax = T::one() / sigma_max;
    let [nx, ny, nz] = grid.dims();

    // masked forward neighbors along x, y, z
    let neighbor = |lin: usize, axis: usize| -> Option<usize> {
        let [i, j, k] = grid.unravel(lin);
        let idx = match axis {
            0 if i + 1 < nx => grid.linear(i + 1, j, k),
            1 if j + 1 < ny => grid.linear(i, j + 1, k),
            2 if k + 1 < nz => grid.linear(i, j, k + 1),
            _ => return None,
        };
        mask_index.masked_of(idx)
    };

    let mut value = T::zero();
    let mut grad_eps = vec![T::zero(); n];
    let mut grad_sigma = vec![T::zero(); n];

    for (m, &lin) in mask_index.voxels().iter().enumerate() {
        let mut s = beta * beta;
        let mut diffs: [Option<(usize, T, T)>; 3] = [None, None, None];
        for axis in 0..3 {
            if let Some(nb) = neighbor(lin, axis) {
                let de = eps_r[nb] - eps_r[m];
                let ds = (sigma[nb] - sigma[m]) * inv_smax;
                s += de * de + ds * ds;
                diffs[axis] = Some((nb, de, ds));
            }
        }
        let root = s.sqrt();
        value += root;
        let inv_root = T::one() / root;
        for d in diffs.iter().flatten() {
            let (nb, de, ds) = *d;
            grad_eps[nb] += de * inv_root;
            grad_eps[m] -= de * inv_root;
            grad_sigma[nb] += ds * inv_smax * inv_root;
            grad_sigma[m] -= ds * inv_smax * inv_root;
        }
    }

    TvResult {
        value,
        grad_eps,
        grad_sigma,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_seq(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        (0..n)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                lo + (hi - lo) * (state as f64 / u64::MAX as f64)
            })
            .collect()
    }

    #[test]
    fn uniform_maps_cost_is_n_beta() {
        let grid = VoxelGrid::<f64>::centered([4, 4, 4], 0.005).unwrap();
        let mask = vec![true; grid.len()];
        let mi = MaskIndex::from_mask(&mask);
        let n = mi.count();
        let r = smoothed_tv(&grid, &mi, &vec![42.0; n], &vec![0.7; n], 3.0);
        assert!((r.value - n as f64 * TV_SMOOTHING).abs() < 1e-12);
        assert!(r.grad_eps.iter().all(|&g| g.abs() < 1e-15));
        assert!(r.grad_sigma.iter().all(|&g| g.abs() < 1e-15));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let grid = VoxelGrid::<f64>::centered([5, 5, 5], 0.005).unwrap();
        // irregular mask to exercise boundary handling
        let mask: Vec<bool> = (0..grid.len()).map(|v| v % 7 != 3).collect();
        let mi = MaskIndex::from_mask(&mask);
        let n = mi.count();
        let eps = rand_seq(n, 5, 10.0, 80.0);
        let sig = rand_seq(n, 9, 0.1, 2.5);
        let smax = 3.0;
        let r = smoothed_tv(&grid, &mi, &eps, &sig, smax);

        let gmax = r
            .grad_eps
            .iter()
            .chain(&r.grad_sigma)
            .fold(0.0f64, |a, &g| a.max(g.abs()));
        let h = 1e-4;
        let mut max_rel: f64 = 0.0;
        for k in (0..n).step_by(7) {
            let mut ep = eps.clone();
            ep[k] += h;
            let fp = smoothed_tv(&grid, &mi, &ep, &sig, smax).value;
            ep[k] -= 2.0 * h;
            let fm = smoothed_tv(&grid, &mi, &ep, &sig, smax).value;
            let fd = (fp - fm) / (2.0 * h);
            max_rel = max_rel.max((fd - r.grad_eps[k]).abs() / fd.abs().max(5e-2 * gmax));

            let mut sg = sig.clone();
            sg[k] += h;
            let fp = smoothed_tv(&grid, &mi, &eps, &sg, smax).value;
            sg[k] -= 2.0 * h;
            let fm = smoothed_tv(&grid, &mi, &eps, &sg, smax).value;
            let fd = (fp - fm) / (2.0 * h);
            max_rel = max_rel.max((fd - r.grad_sigma[k]).abs() / fd.abs().max(5e-2 * gmax));
        }
        assert!(max_rel < 1e-6, "max relative gradient error {max_rel}");
    }

    #[test]
    fn value_independent_of_unmasked_neighbors() {
        let grid = VoxelGrid::<f64>::centered([3, 3, 3], 0.01).unwrap();
        let mut mask = vec![false; grid.len()];
        mask[13] = true; // single interior voxel
        let mi = MaskIndex::from_mask(&mask);
        let r = smoothed_tv(&grid, &mi, &[50.0], &[1.0], 3.0);
        assert!((r.value - TV_SMOOTHING).abs() < 1e-18);
    }
}
