//! Electrical-property maps: per-voxel relative permittivity and
//! conductivity with a sample mask, and the derived complex relative
//! permittivity under the e^{+i omega t} time convention.

use crate::error::{Error, Result};
use crate::grid::{MaskIndex, VoxelGrid};
use crate::scalar::{eps0, Cplx, Real};

/// Per-voxel relative permittivity and conductivity plus a sample mask.
///
/// Outside the mask, `eps_r == 1` and `sigma_e == 0` exactly; inside,
/// `eps_r >= 1` and `sigma_e >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpMap<T> {
    pub grid: VoxelGrid<T>,
    pub eps_r: Vec<T>,
    pub sigma_e: Vec<T>,
    pub mask: Vec<bool>,
}

impl<T: Real> EpMap<T> {
    pub fn new(grid: VoxelGrid<T>, eps_r: Vec<T>, sigma_e: Vec<T>, mask: Vec<bool>) -> Result<Self> {
        let n = grid.len();
        if eps_r.len() != n || sigma_e.len() != n || mask.len() != n {
            return Err(Error::invalid("EP map field lengths must match grid size"));
        }
        for v in 0..n {
            if mask[v] {
                if !(eps_r[v] >= T::one()) {
                    return Err(Error::invalid(format!(
                        "eps_r must be >= 1 on masked voxels (voxel {v}: {})",
                        eps_r[v]
                    )));
                }
                if !(sigma_e[v] >= T::zero()) {
                    return Err(Error::invalid(format!(
                        "sigma_e must be >= 0 on masked voxels (voxel {v}: {})",
                        sigma_e[v]
                    )));
                }
            } else if eps_r[v] != T::one() || sigma_e[v] != T::zero() {
                return Err(Error::invalid(format!(
                    "unmasked voxel {v} must be vacuum (eps_r = 1, sigma_e = 0)"
                )));
            }
        }
        Ok(Self {
            grid,
            eps_r,
            sigma_e,
            mask,
        })
    }

    /// All-vacuum map with empty mask.
    pub fn vacuum(grid: VoxelGrid<T>) -> Self {
        let n = grid.len();
        Self {
            grid,
            eps_r: vec![T::one(); n],
            sigma_e: vec![T::zero(); n],
            mask: vec![false; n],
        }
    }

    pub fn mask_index(&self) -> MaskIndex {
        MaskIndex::from_mask(&self.mask)
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Complex relative permittivity field at a fixed angular frequency.
///
/// `eps = eps_r + sigma_e / (i omega eps0)`; lossy voxels have
/// `Im(eps) <= 0` under the adopted e^{+i omega t} convention.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexPermittivityField<T> {
    pub grid: VoxelGrid<T>,
    pub eps: Vec<Cplx<T>>,
    pub omega: T,
}

/// Complex relative permittivity per voxel; equals 1 + 0i outside the mask.
pub fn complex_permittivity<T: Real>(ep: &EpMap<T>, omega: T) -> Result<ComplexPermittivityField<T>> {
    if !(omega > T::zero()) {
        return Err(Error::invalid("omega must be positive"));
    }
    let we = omega * eps0::<T>();
    let eps = ep
        .eps_r
        .iter()
        .zip(&ep.sigma_e)
        .map(|(&er, &s)| Cplx::new(er, -s / we))
        .collect();
    Ok(ComplexPermittivityField {
        grid: ep.grid.clone(),
        eps,
        omega,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::EPS0_F64;

    fn grid1() -> VoxelGrid<f64> {
        VoxelGrid::new([1, 1, 1], 0.005, [0.0; 3]).unwrap()
    }

    #[test]
    fn phantom_value_at_seven_tesla() {
        // eps_r = 80, sigma = 0.6 S/m at 297.2 MHz. Expected imaginary part
        // evaluated directly from the defining formula.
        let ep = EpMap::new(grid1(), vec![80.0], vec![0.6], vec![true]).unwrap();
        let omega = 2.0 * std::f64::consts::PI * 297.2e6;
        let f = complex_permittivity(&ep, omega).unwrap();
        let expected_im = -0.6 / (omega * EPS0_F64);
        assert!((f.eps[0].re - 80.0).abs() < 1e-12);
        assert!((f.eps[0].im - expected_im).abs() < 1e-12);
        // Magnitude of the spec-quoted value: about 80 - 36.29i.
        assert!((f.eps[0].im + 36.29).abs() < 0.01);
    }

    #[test]
    fn vacuum_voxel_is_one() {
        let ep = EpMap::vacuum(grid1());
        let f = complex_permittivity(&ep, 1.0e9).unwrap();
        assert_eq!(f.eps[0], Cplx::new(1.0, 0.0));
    }

    #[test]
    fn lossless_has_zero_imaginary() {
        let ep = EpMap::new(grid1(), vec![42.0], vec![0.0], vec![true]).unwrap();
        let f = complex_permittivity(&ep, 2.0e9).unwrap();
        assert_eq!(f.eps[0].im, 0.0);
    }

    #[test]
    fn linear_in_sigma_at_fixed_eps_r() {
        let g = grid1();
        let omega = 2.0 * std::f64::consts::PI * 297.2e6;
        let e = |s: f64| {
            let ep = EpMap::new(g.clone(), vec![10.0], vec![s], vec![true]).unwrap();
            complex_permittivity(&ep, omega).unwrap().eps[0]
        };
        let lhs = e(0.7 + 0.4) - e(0.7);
        let rhs = e(0.4) - e(0.0);
        assert!((lhs - rhs).norm() < 1e-12 * rhs.norm());
    }

    #[test]
    fn nonpositive_omega_rejected() {
        let ep = EpMap::vacuum(grid1());
        assert!(complex_permittivity(&ep, 0.0).is_err());
        assert!(complex_permittivity(&ep, -1.0).is_err());
    }

    #[test]
    fn construction_validates_ranges() {
        let g = grid1();
        assert!(EpMap::new(g.clone(), vec![0.5], vec![0.0], vec![true]).is_err());
        assert!(EpMap::new(g.clone(), vec![2.0], vec![-0.1], vec![true]).is_err());
        // unmasked voxel must be exactly vacuum
        assert!(EpMap::new(g, vec![2.0], vec![0.0], vec![false]).is_err());
    }
}
