//! Forward electromagnetic solvers (volume and volume-surface integral
//! equations) and an adjoint-gradient inverse solver reconstructing voxel
//! electrical properties from transmit-field (B1+) data.
//!
//! The numerical core is generic over the scalar type via [`scalar::Real`]
//! (f32 or f64); concrete f64 aliases are exported at the crate root.

pub mod coil;
pub mod calibration;
pub mod cost;
pub mod ep;
pub mod error;
pub mod fft;
pub mod forward;
pub mod gmt;
pub mod green;
pub mod grid;
pub mod gmres;
pub mod io;
pub mod kernel;
pub mod lbfgsb;
pub mod linalg;
pub mod metrics;
pub mod phantom;
pub mod regularizer;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::{Cplx, Real};

/// Concrete f64 aliases (the production scalar type).
pub type VoxelGrid64 = grid::VoxelGrid<f64>;
pub type EpMap64 = ep::EpMap<f64>;
pub type ComplexPermittivityField64 = ep::ComplexPermittivityField<f64>;
pub type PhantomSpec64 = phantom::PhantomSpec<f64>;
pub type ToeplitzKernel64 = kernel::ToeplitzKernel<f64>;
pub type VecField64 = grid::VecField<f64>;
pub type ComplexVolume64 = grid::ComplexVolume<f64>;
pub type Cplx64 = Cplx<f64>;
