//! Voxelized computational domain: regular isotropic grid, scalar/complex
//! per-voxel volumes, 3-component complex vector fields, and the masked
//! index set that the integral-equation unknowns live on.
//!
//! Linear voxel order is x-fastest: `linear = i + nx*(j + ny*k)`.

use crate::error::{Error, Result};
use crate::scalar::{Cplx, Real};

/// Regular voxel grid with isotropic resolution.
///
/// Voxel center: `origin + resolution * (i + 1/2, j + 1/2, k + 1/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid<T> {
    dims: [usize; 3],
    resolution: T,
    origin: [T; 3],
}

impl<T: Real> VoxelGrid<T> {
    pub fn new(dims: [usize; 3], resolution: T, origin: [T; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("grid dims must all be >= 1"));
        }
        if !(resolution > T::zero()) || !resolution.is_finite() {
            return Err(Error::invalid("grid resolution must be positive"));
        }
        Ok(Self {
            dims,
            resolution,
            origin,
        })
    }

    /// Grid whose bounding box is centered on the coordinate origin.
    pub fn centered(dims: [usize; 3], resolution: T) -> Result<Self> {
        let half = |n: usize| -> T {
            let ext = resolution * T::from_usize(n).unwrap();
            -ext / (T::one() + T::one())
        };
        Self::new(dims, resolution, [half(dims[0]), half(dims[1]), half(dims[2])])
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn resolution(&self) -> T {
        self.resolution
    }

    #[inline]
    pub fn origin(&self) -> [T; 3] {
        self.origin
    }

    /// Number of voxels.
    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false // dims >= 1 by construction
    }

    /// Voxel volume (isotropic cube).
    #[inline]
    pub fn voxel_volume(&self) -> T {
        self.resolution * self.resolution * self.resolution
    }

    #[inline]
    pub fn linear(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn unravel(&self, lin: usize) -> [usize; 3] {
        let i = lin % self.dims[0];
        let rest = lin / self.dims[0];
        let j = rest % self.dims[1];
        let k = rest / self.dims[1];
        [i, j, k]
    }

    /// Voxel center coordinates.
    #[inline]
    pub fn center(&self, i: usize, j: usize, k: usize) -> [T; 3] {
        let half = T::from_f64(0.5).unwrap();
        [
            self.origin[0] + self.resolution * (T::from_usize(i).unwrap() + half),
            self.origin[1] + self.resolution * (T::from_usize(j).unwrap() + half),
            self.origin[2] + self.resolution * (T::from_usize(k).unwrap() + half),
        ]
    }

    #[inline]
    pub fn center_lin(&self, lin: usize) -> [T; 3] {
        let [i, j, k] = self.unravel(lin);
        self.center(i, j, k)
    }

    /// Voxel containing a point, if inside the grid bounding box.
    pub fn voxel_of(&self, p: [T; 3]) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let rel = (p[a] - self.origin[a]) / self.resolution;
            if rel < T::zero() {
                return None;
            }
            let i = rel.floor().to_usize()?;
            if i >= self.dims[a] {
                return None;
            }
            idx[a] = i;
        }
        Some(idx)
    }

    /// Min/max corners of the grid bounding box.
    pub fn bounds(&self) -> ([T; 3], [T; 3]) {
        let mut hi = self.origin;
        for a in 0..3 {
            hi[a] = hi[a] + self.resolution * T::from_usize(self.dims[a]).unwrap();
        }
        (self.origin, hi)
    }

    /// Iterate (i, j, k, linear) in linear order.
    pub fn iter_indices(&self) -> impl Iterator<Item = ([usize; 3], usize)> + '_ {
        let [nx, ny, nz] = self.dims;
        (0..nz).flat_map(move |k| {
            (0..ny).flat_map(move |j| (0..nx).map(move |i| ([i, j, k], self.linear(i, j, k))))
        })
    }

    /// Same dims and resolution (origin-insensitive layout check).
    pub fn same_layout(&self, other: &Self) -> bool {
        self.dims == other.dims && self.resolution == other.resolution
    }
}

/// Index set of masked voxels with forward and reverse maps.
#[derive(Debug, Clone)]
pub struct MaskIndex {
    /// Linear voxel ids of masked voxels, ascending.
    voxels: Vec<usize>,
    /// Reverse map: full linear id -> masked index, usize::MAX if unmasked.
    reverse: Vec<usize>,
}

impl MaskIndex {
    pub fn from_mask(mask: &[bool]) -> Self {
        let mut voxels = Vec::new();
        let mut reverse = vec![usize::MAX; mask.len()];
        for (lin, &m) in mask.iter().enumerate() {
            if m {
                reverse[lin] = voxels.len();
                voxels.push(lin);
            }
        }
        Self { voxels, reverse }
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.voxels.len()
    }

    #[inline]
    pub fn grid_len(&self) -> usize {
        self.reverse.len()
    }

    #[inline]
    pub fn voxels(&self) -> &[usize] {
        &self.voxels
    }

    #[inline]
    pub fn masked_of(&self, lin: usize) -> Option<usize> {
        let m = self.reverse[lin];
        (m != usize::MAX).then_some(m)
    }

    /// Scatter a masked 3-component vector (component-major, len 3*count)
    /// into a full-grid vector field (zeros elsewhere).
    pub fn scatter<T: Real>(&self, x: &[Cplx<T>], grid: &VoxelGrid<T>) -> VecField<T> {
        assert_eq!(x.len(), 3 * self.count());
        let mut out = VecField::zeros(grid.clone());
        let n = self.count();
        for p in 0..3 {
            let comp = out.comp_mut(p);
            for (m, &lin) in self.voxels.iter().enumerate() {
                comp[lin] = x[p * n + m];
            }
        }
        out
    }

    /// Gather a full-grid vector field into masked component-major storage.
    pub fn gather<T: Real>(&self, f: &VecField<T>) -> Vec<Cplx<T>> {
        let n = self.count();
        let mut out = vec![Cplx::new(T::zero(), T::zero()); 3 * n];
        for p in 0..3 {
            let comp = f.comp(p);
            for (m, &lin) in self.voxels.iter().enumerate() {
                out[p * n + m] = comp[lin];
            }
        }
        out
    }
}

/// Real scalar volume over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume<T> {
    pub grid: VoxelGrid<T>,
    pub data: Vec<T>,
}

impl<T: Real> ScalarVolume<T> {
    pub fn zeros(grid: VoxelGrid<T>) -> Self {
        let n = grid.len();
        Self {
            grid,
            data: vec![T::zero(); n],
        }
    }

    pub fn constant(grid: VoxelGrid<T>, v: T) -> Self {
        let n = grid.len();
        Self {
            grid,
            data: vec![v; n],
        }
    }
}

/// Complex per-voxel volume (one value per voxel), e.g. a B1+ map.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVolume<T> {
    pub grid: VoxelGrid<T>,
    pub data: Vec<Cplx<T>>,
}

impl<T: Real> ComplexVolume<T> {
    pub fn zeros(grid: VoxelGrid<T>) -> Self {
        let n = grid.len();
        Self {
            grid,
            data: vec![Cplx::new(T::zero(), T::zero()); n],
        }
    }
}

/// 3-component complex vector field, component-major layout:
/// `data[p * n + v]` for component p in {x, y, z} and voxel v.
#[derive(Debug, Clone, PartialEq)]
pub struct VecField<T> {
    pub grid: VoxelGrid<T>,
    data: Vec<Cplx<T>>,
}

impl<T: Real> VecField<T> {
    pub fn zeros(grid: VoxelGrid<T>) -> Self {
        let n = grid.len();
        Self {
            grid,
            data: vec![Cplx::new(T::zero(), T::zero()); 3 * n],
        }
    }

    #[inline]
    pub fn comp(&self, p: usize) -> &[Cplx<T>] {
        let n = self.grid.len();
        &self.data[p * n..(p + 1) * n]
    }

    #[inline]
    pub fn comp_mut(&mut self, p: usize) -> &mut [Cplx<T>] {
        let n = self.grid.len();
        &mut self.data[p * n..(p + 1) * n]
    }

    #[inline]
    pub fn get(&self, p: usize, lin: usize) -> Cplx<T> {
        self.data[p * self.grid.len() + lin]
    }

    #[inline]
    pub fn set(&mut self, p: usize, lin: usize, v: Cplx<T>) {
        let n = self.grid.len();
        self.data[p * n + lin] = v;
    }

    #[inline]
    pub fn raw(&self) -> &[Cplx<T>] {
        &self.data
    }

    #[inline]
    pub fn raw_mut(&mut self) -> &mut [Cplx<T>] {
        &mut self.data
    }
}
