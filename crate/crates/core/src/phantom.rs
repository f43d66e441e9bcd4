//! Analytic phantom generators. Voxel membership is decided by center
//! inclusion (staircase discretization, no partial-volume averaging).

use crate::ep::EpMap;
use crate::error::{Error, Result};
use crate::grid::VoxelGrid;
use crate::scalar::Real;

/// Electrical properties of one phantom compartment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompartmentEp<T> {
    pub eps_r: T,
    pub sigma_e: T,
}

/// One spherical layer: outer radius plus the EP filling it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereLayer<T> {
    pub radius: T,
    pub ep: CompartmentEp<T>,
}

/// Geometric phantom description. Cylinders are z-axis aligned.
#[derive(Debug, Clone, PartialEq)]
pub enum PhantomSpec<T> {
    Cylinder {
        center: [T; 3],
        radius: T,
        length: T,
        ep: CompartmentEp<T>,
    },
    TwoCompartmentCylinder {
        center: [T; 3],
        outer_radius: T,
        length: T,
        /// In-plane (x, y) displacement of the inner cylinder axis.
        inner_offset: [T; 2],
        inner_radius: T,
        outer: CompartmentEp<T>,
        inner: CompartmentEp<T>,
    },
    LayeredSphere {
        center: [T; 3],
        /// Outermost first, radii strictly decreasing.
        layers: Vec<SphereLayer<T>>,
    },
}

fn in_cylinder<T: Real>(p: [T; 3], center: [T; 3], radius: T, length: T) -> bool {
    let dx = p[0] - center[0];
    let dy = p[1] - center[1];
    let dz = p[2] - center[2];
    let half = length / (T::one() + T::one());
    dx * dx + dy * dy <= radius * radius && dz.abs() <= half
}

fn check_cylinder_fits<T: Real>(
    grid: &VoxelGrid<T>,
    center: [T; 3],
    radius: T,
    length: T,
) -> Result<()> {
    let (lo, hi) = grid.bounds();
    let half = length / (T::one() + T::one());
    let fits = center[0] - radius >= lo[0]
        && center[0] + radius <= hi[0]
        && center[1] - radius >= lo[1]
        && center[1] + radius <= hi[1]
        && center[2] - half >= lo[2]
        && center[2] + half <= hi[2];
    if fits {
        Ok(())
    } else {
        Err(Error::invalid("cylinder exceeds grid bounds"))
    }
}

/// Build a cylindrical phantom (single or two-compartment) on a grid.
pub fn build_cylinder_phantom<T: Real>(spec: &PhantomSpec<T>, grid: &VoxelGrid<T>) -> Result<EpMap<T>> {
    match spec {
        PhantomSpec::Cylinder {
            center,
            radius,
            length,
            ep,
        } => {
            validate_ep(ep)?;
            check_cylinder_fits(grid, *center, *radius, *length)?;
            let mut map = EpMap::vacuum(grid.clone());
            for (idx, lin) in grid.iter_indices() {
                let c = grid.center(idx[0], idx[1], idx[2]);
                if in_cylinder(c, *center, *radius, *length) {
                    map.mask[lin] = true;
                    map.eps_r[lin] = ep.eps_r;
                    map.sigma_e[lin] = ep.sigma_e;
                }
            }
            Ok(map)
        }
        PhantomSpec::TwoCompartmentCylinder {
            center,
            outer_radius,
            length,
            inner_offset,
            inner_radius,
            outer,
            inner,
        } => {
            validate_ep(outer)?;
            validate_ep(inner)?;
            let off = (inner_offset[0] * inner_offset[0] + inner_offset[1] * inner_offset[1]).sqrt();
            if !(*inner_radius + off < *outer_radius) {
                return Err(Error::invalid(
                    "inner compartment must lie strictly inside the outer cylinder",
                ));
            }
            check_cylinder_fits(grid, *center, *outer_radius, *length)?;
            let inner_center = [center[0] + inner_offset[0], center[1] + inner_offset[1], center[2]];
            let mut map = EpMap::vacuum(grid.clone());
            for (idx, lin) in grid.iter_indices() {
                let c = grid.center(idx[0], idx[1], idx[2]);
                if in_cylinder(c, inner_center, *inner_radius, *length) {
                    map.mask[lin] = true;
                    map.eps_r[lin] = inner.eps_r;
                    map.sigma_e[lin] = inner.sigma_e;
                } else if in_cylinder(c, *center, *outer_radius, *length) {
                    map.mask[lin] = true;
                    map.eps_r[lin] = outer.eps_r;
                    map.sigma_e[lin] = outer.sigma_e;
                }
            }
            Ok(map)
        }
        PhantomSpec::LayeredSphere { .. } => build_layered_sphere_phantom(spec, grid),
    }
}

/// Build a concentric layered sphere; the innermost containing layer wins.
pub fn build_layered_sphere_phantom<T: Real>(
    spec: &PhantomSpec<T>,
    grid: &VoxelGrid<T>,
) -> Result<EpMap<T>> {
    let (center, layers) = match spec {
        PhantomSpec::LayeredSphere { center, layers } => (center, layers),
        _ => return Err(Error::invalid("spec is not a layered sphere")),
    };
    for w in layers.windows(2) {
        if !(w[1].radius < w[0].radius) {
            return Err(Error::invalid("sphere layer radii must be strictly decreasing"));
        }
    }
    for l in layers {
        validate_ep(&l.ep)?;
        if !(l.radius > T::zero()) {
            return Err(Error::invalid("sphere layer radius must be positive"));
        }
    }
    let mut map = EpMap::vacuum(grid.clone());
    if layers.is_empty() {
        return Ok(map);
    }
    for (idx, lin) in grid.iter_indices() {
        let c = grid.center(idx[0], idx[1], idx[2]);
        let dx = c[0] - center[0];
        let dy = c[1] - center[1];
        let dz = c[2] - center[2];
        let r2 = dx * dx + dy * dy + dz * dz;
        // innermost (last) containing layer wins
        let mut chosen: Option<&SphereLayer<T>> = None;
        for l in layers {
            if r2 <= l.radius * l.radius {
                chosen = Some(l);
            } else {
                break; // radii decrease; once outside, outside of all deeper layers too
            }
        }
        if let Some(l) = chosen {
            map.mask[lin] = true;
            map.eps_r[lin] = l.ep.eps_r;
            map.sigma_e[lin] = l.ep.sigma_e;
        }
    }
    Ok(map)
}

fn validate_ep<T: Real>(ep: &CompartmentEp<T>) -> Result<()> {
    if !(ep.eps_r >= T::one()) {
        return Err(Error::invalid("compartment eps_r must be >= 1"));
    }
    if !(ep.sigma_e >= T::zero()) {
        return Err(Error::invalid("compartment sigma_e must be >= 0"));
    }
    Ok(())
}
