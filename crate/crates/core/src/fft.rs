//! Minimal 3-D complex FFT on top of rustfft, x-fastest layout.
//! Inverse is scaled by 1/N so that inverse(forward(x)) == x.

use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use crate::scalar::{Cplx, Real};

#[derive(Clone)]
pub struct Fft3<T: Real> {
    dims: [usize; 3],
    fwd: [Arc<dyn Fft<T>>; 3],
    inv: [Arc<dyn Fft<T>>; 3],
}

impl<T: Real> std::fmt::Debug for Fft3<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft3").field("dims", &self.dims).finish()
    }
}

impl<T: Real> Fft3<T> {
    pub fn new(dims: [usize; 3]) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = [
            planner.plan_fft_forward(dims[0]),
            planner.plan_fft_forward(dims[1]),
            planner.plan_fft_forward(dims[2]),
        ];
        let inv = [
            planner.plan_fft_inverse(dims[0]),
            planner.plan_fft_inverse(dims[1]),
            planner.plan_fft_inverse(dims[2]),
        ];
        Self { dims, fwd, inv }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn forward(&self, data: &mut [Cplx<T>]) {
        self.transform(data, true);
    }

    /// Inverse transform including the 1/N normalization.
    pub fn inverse(&self, data: &mut [Cplx<T>]) {
        self.transform(data, false);
        let scale = T::one() / T::from_usize(self.len()).unwrap();
        for v in data.iter_mut() {
            *v = *v * scale;
        }
    }

    fn transform(&self, data: &mut [Cplx<T>], forward: bool) {
        assert_eq!(data.len(), self.len(), "buffer size mismatch");
        let [nx, ny, nz] = self.dims;
        let plans = if forward { &self.fwd } else { &self.inv };
        let zero = Cplx::new(T::zero(), T::zero());

        // x axis: rows are contiguous, one batched call over the buffer.
        let mut scratch = vec![zero; plans[0].get_inplace_scratch_len()];
        plans[0].process_with_scratch(data, &mut scratch);

        // y axis: transpose each z-slab to y-major, batch, transpose back.
        let mut slab = vec![zero; nx * ny];
        let mut scratch = vec![zero; plans[1].get_inplace_scratch_len()];
        for k in 0..nz {
            let base = nx * ny * k;
            for j in 0..ny {
                for i in 0..nx {
                    slab[i * ny + j] = data[base + j * nx + i];
                }
            }
            plans[1].process_with_scratch(&mut slab, &mut scratch);
            for j in 0..ny {
                for i in 0..nx {
                    data[base + j * nx + i] = slab[i * ny + j];
                }
            }
        }

        // z axis: transpose each y-slab (fixed j) to z-major, batch, restore.
        let mut slab = vec![zero; nx * nz];
        let mut scratch = vec![zero; plans[2].get_inplace_scratch_len()];
        let stride = nx * ny;
        for j in 0..ny {
            let base = nx * j;
            for k in 0..nz {
                for i in 0..nx {
                    slab[i * nz + k] = data[base + stride * k + i];
                }
            }
            plans[2].process_with_scratch(&mut slab, &mut scratch);
            for k in 0..nz {
                for i in 0..nx {
                    data[base + stride * k + i] = slab[i * nz + k];
                }
            }
        }
    }
}
