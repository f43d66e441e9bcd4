//! Weighted data-consistency cost on channel-pair B1+ products, its
//! normalization, the SNR-driven voxel weights, and the cosensitivity
//! volumes consumed by the adjoint gradient.
//!
//! f_d = eta^{-1} sqrt( sum_{l,l'} || w_l o w_l' o delta_ll' ||^2 ),
//! delta_ll' = measured_l o conj(measured_l') - sim_l o conj(sim_l'),
//! with the pair sum running over all ordered pairs including l = l'.

use crate::error::{Error, Result};
use crate::forward::B1Set;
use crate::scalar::{Cplx, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// w = sqrt(|measured| / max |measured|)
    Sqrt,
    /// w = |measured| / max |measured| (penalizes low SNR harder)
    Linear,
}

/// Per-channel, per-voxel data-consistency weights from measured magnitudes;
/// zero outside the mask.
pub fn weights_from_measured<T: Real>(
    b1: &B1Set<T>,
    mask: &[bool],
    mode: WeightMode,
) -> Result<Vec<Vec<T>>> {
    if mask.len() != b1.grid.len() {
        return Err(Error::invalid("mask length mismatch"));
    }
    let mut out = Vec::with_capacity(b1.channel_count());
    for (l, ch) in b1.channels.iter().enumerate() {
        let max = ch
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(c, _)| c.norm())
            .fold(T::zero(), |a, b| a.max(b));
        if max == T::zero() {
            return Err(Error::invalid(format!(
                "channel {l} is identically zero on the mask"
            )));
        }
        let w = ch
            .iter()
            .zip(mask)
            .map(|(c, &m)| {
                if !m {
                    T::zero()
                } else {
                    let ratio = c.norm() / max;
                    match mode {
                        WeightMode::Sqrt => ratio.sqrt(),
                        WeightMode::Linear => ratio,
                    }
                }
            })
            .collect();
        out.push(w);
    }
    Ok(out)
}

/// Measured B1+ maps (magnitudes plus relative phases, possibly shimmed)
/// with their data-consistency weights and cached normalization.
#[derive(Debug, Clone)]
pub struct Measurements<T> {
    pub b1: B1Set<T>,
    pub weights: Vec<Vec<T>>,
    eta: T,
}

impl<T: Real> Measurements<T> {
    pub fn new(b1: B1Set<T>, weights: Vec<Vec<T>>) -> Result<Self> {
        let n = b1.grid.len();
        if weights.len() != b1.channel_count() {
            return Err(Error::invalid("one weight volume per channel required"));
        }
        if weights.iter().any(|w| w.len() != n) {
            return Err(Error::invalid("weight volume length mismatch"));
        }
        if weights
            .iter()
            .any(|w| w.iter().any(|&v| !(v >= T::zero() && v <= T::one())))
        {
            return Err(Error::invalid("weights must lie in [0, 1]"));
        }
        let eta = eta_normalization(&b1.channels, &weights, n)?;
        Ok(Self { b1, weights, eta })
    }

    #[inline]
    pub fn eta(&self) -> T {
        self.eta
    }

    #[inline]
    pub fn channel_count(&self) -> usize {
        self.b1.channel_count()
    }
}

fn eta_normalization<T: Real>(measured: &[Vec<Cplx<T>>], w: &[Vec<T>], n: usize) -> Result<T> {
    let l_ch = measured.len();
    let mut sum = T::zero();
    for l in 0..l_ch {
        for lp in 0..l_ch {
            for v in 0..n {
                let ww = w[l][v] * w[lp][v];
                if ww == T::zero() {
                    continue;
                }
                let prod = measured[l][v] * measured[lp][v].conj();
                sum += (ww * ww) * prod.norm_sqr();
            }
        }
    }
    if sum == T::zero() {
        return Err(Error::invalid(
            "normalization eta vanishes; measured maps are zero under the weights",
        ));
    }
    Ok(sum.sqrt())
}

/// Plain data-consistency evaluation: f_d plus the per-pair residual
/// volumes delta_ll' (ordered pairs, l' fastest).
pub fn data_consistency<T: Real>(
    meas: &Measurements<T>,
    sim: &[Vec<Cplx<T>>],
) -> Result<(T, Vec<Vec<Cplx<T>>>)> {
    let l_ch = meas.channel_count();
    if sim.len() != l_ch {
        return Err(Error::invalid("channel count mismatch"));
    }
    let n = meas.b1.grid.len();
    let mut deltas = Vec::with_capacity(l_ch * l_ch);
    let mut s = T::zero();
    for l in 0..l_ch {
        for lp in 0..l_ch {
            let mut d = vec![Cplx::new(T::zero(), T::zero()); n];
            for v in 0..n {
                let md = meas.b1.channels[l][v] * meas.b1.channels[lp][v].conj();
                let sd = sim[l][v] * sim[lp][v].conj();
                d[v] = md - sd;
                let ww = meas.weights[l][v] * meas.weights[lp][v];
                s += (ww * ww) * d[v].norm_sqr();
            }
            deltas.push(d);
        }
    }
    Ok((s.sqrt() / meas.eta, deltas))
}

/// Phase-shim Jacobian at a reference voxel: beta = B conj(B_v)/|B_v|.
/// `apply` maps a holomorphic perturbation dB to d beta; `apply_conj` maps
/// it to d conj(beta). Linear maps, never materialized as matrices.
#[derive(Debug, Clone)]
pub struct ShimJacobian<T> {
    /// unit phase factor conj(B_v)/|B_v|
    pub phi: Cplx<T>,
    /// unshimmed volume B
    pub b: Vec<Cplx<T>>,
    pub v: usize,
    pub mag_v: T,
}

impl<T: Real> ShimJacobian<T> {
    pub fn new(b: &[Cplx<T>], v: usize) -> Result<Self> {
        let mag = b[v].norm();
        if mag == T::zero() {
            return Err(Error::invalid("zero field at the shim reference voxel"));
        }
        Ok(Self {
            phi: b[v].conj() / Cplx::new(mag, T::zero()),
            b: b.to_vec(),
            v,
            mag_v: mag,
        })
    }

    /// d beta = phi (dB - phi B dB_v / (2 |B_v|)).
    pub fn apply(&self, db: &[Cplx<T>]) -> Vec<Cplx<T>> {
        let two = T::one() + T::one();
        let spike = self.phi * self.phi * db[self.v] / Cplx::new(two * self.mag_v, T::zero());
        db.iter()
            .zip(&self.b)
            .map(|(&d, &b)| self.phi * d - spike * b)
            .collect()
    }

    /// d conj(beta) = conj(B) dB_v / (2 |B_v|).
    pub fn apply_conj(&self, db: &[Cplx<T>]) -> Vec<Cplx<T>> {
        let two = T::one() + T::one();
        let spike = db[self.v] / Cplx::new(two * self.mag_v, T::zero());
        self.b.iter().map(|&b| b.conj() * spike).collect()
    }

    /// Transpose (unconjugated) of the pair of maps: given cotangents a1
    /// against d beta and a2 against d conj(beta), return the cotangent
    /// against dB, i.e. J1^T a1 + J2^T a2.
    pub fn pullback(&self, a1: &[Cplx<T>], a2: &[Cplx<T>]) -> Vec<Cplx<T>> {
        let two = T::one() + T::one();
        let denom = Cplx::new(two * self.mag_v, T::zero());
        let mut sum_a1_b = Cplx::new(T::zero(), T::zero());
        for (a, b) in a1.iter().zip(&self.b) {
            sum_a1_b += *a * *b;
        }
        let mut sum_a2_bc = Cplx::new(T::zero(), T::zero());
        for (a, b) in a2.iter().zip(&self.b) {
            sum_a2_bc += *a * b.conj();
        }
        let mut out: Vec<Cplx<T>> = a1.iter().map(|&a| self.phi * a).collect();
        out[self.v] += -self.phi * self.phi * sum_a1_b / denom + sum_a2_bc / denom;
        out
    }
}

/// Full cost evaluation used by the inverse loop: f_d plus the per-channel
/// cosensitivity volumes t such that dS/d eps = -2 sum_l t_l^T dB_l/d eps.
#[derive(Debug, Clone)]
pub struct CostEval<T> {
    pub f_d: T,
    /// cosensitivity per channel, full grid
    pub t: Vec<Vec<Cplx<T>>>,
    /// true when f_d is at the numerical zero floor and the gradient is
    /// defined as zero
    pub grad_zero: bool,
}

pub fn cost_and_cosensitivity<T: Real>(
    meas: &Measurements<T>,
    sim_b1: &[Vec<Cplx<T>>],
    shim_voxel: Option<usize>,
) -> Result<CostEval<T>> {
    let l_ch = meas.channel_count();
    if sim_b1.len() != l_ch {
        return Err(Error::invalid("channel count mismatch"));
    }
    let n = meas.b1.grid.len();

    // shim the simulated volumes when requested
    let (beta, shims): (Vec<Vec<Cplx<T>>>, Option<Vec<ShimJacobian<T>>>) = match shim_voxel {
        None => (sim_b1.to_vec(), None),
        Some(v) => {
            let mut shims = Vec::with_capacity(l_ch);
            let mut beta = Vec::with_capacity(l_ch);
            for b in sim_b1 {
                let j = ShimJacobian::new(b, v)?;
                beta.push(
                    b.iter()
                        .map(|&x| x * j.phi)
                        .collect::<Vec<_>>(),
                );
                shims.push(j);
            }
            (beta, Some(shims))
        }
    };

    let zero = Cplx::new(T::zero(), T::zero());
    let mut s_total = T::zero();
    // A1_l and A2_l cotangent volumes in beta space
    let mut a1 = vec![vec![zero; n]; l_ch];
    let mut a2 = vec![vec![zero; n]; l_ch];
    let two = T::one() + T::one();

    for l in 0..l_ch {
        for lp in 0..l_ch {
            for v in 0..n {
                let ww = meas.weights[l][v] * meas.weights[lp][v];
                if ww == T::zero() {
                    continue;
                }
                let w2 = ww * ww;
                let md = meas.b1.channels[l][v] * meas.b1.channels[lp][v].conj();
                let sd = beta[l][v] * beta[lp][v].conj();
                let delta = md - sd;
                s_total += w2 * delta.norm_sqr();
                let base = delta.conj() * w2;
                a1[l][v] += base * beta[lp][v].conj() * (-two);
                a2[lp][v] += base * beta[l][v] * (-two);
            }
        }
    }

    let f_d = s_total.sqrt() / meas.eta;
    let grad_zero = f_d < crate::scalar::real::<T>(1e-14);

    // pull the beta-space cotangents back to B space: t = -(J1^T a1 + J2^T a2)/2
    let half = T::one() / two;
    let t: Vec<Vec<Cplx<T>>> = match &shims {
        None => a1
            .into_iter()
            .map(|ch| ch.into_iter().map(|c| -c * half).collect())
            .collect(),
        Some(js) => a1
            .iter()
            .zip(a2.iter())
            .zip(js)
            .map(|((c1, c2), j)| {
                j.pullback(c1, c2)
                    .into_iter()
                    .map(|c| -c * half)
                    .collect()
            })
            .collect(),
    };

    Ok(CostEval { f_d, t, grad_zero })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VoxelGrid;

    fn grid_n(n: usize) -> VoxelGrid<f64> {
        VoxelGrid::new([n, 1, 1], 0.005, [0.0; 3]).unwrap()
    }

    #[test]
    fn weights_examples() {
        let grid = grid_n(3);
        let data = vec![
            Cplx::new(4.0, 0.0),
            Cplx::new(0.0, 1.0),
            Cplx::new(2.0, 0.0),
        ];
        let b1 = B1Set::new(grid, vec![data]).unwrap();
        let mask = vec![true, true, true];
        let w = weights_from_measured(&b1, &mask, WeightMode::Sqrt).unwrap();
        assert!((w[0][0] - 1.0).abs() < 1e-15);
        assert!((w[0][1] - 0.5).abs() < 1e-15); // sqrt(1/4)
        let wl = weights_from_measured(&b1, &mask, WeightMode::Linear).unwrap();
        assert!((wl[0][1] - 0.25).abs() < 1e-15);

        // masked-out voxels get zero weight
        let w2 = weights_from_measured(&b1, &[true, false, true], WeightMode::Sqrt).unwrap();
        assert_eq!(w2[0][1], 0.0);

        // all-zero channel rejected
        let z = B1Set::new(grid_n(3), vec![vec![Cplx::new(0.0, 0.0); 3]]).unwrap();
        assert!(weights_from_measured(&z, &mask, WeightMode::Sqrt).is_err());
    }

    #[test]
    fn single_voxel_hand_value() {
        // one channel, one voxel, w = 1: measured 1, simulated 0.5
        let grid = grid_n(1);
        let meas = Measurements::new(
            B1Set::new(grid.clone(), vec![vec![Cplx::new(1.0, 0.0)]]).unwrap(),
            vec![vec![1.0]],
        )
        .unwrap();
        assert!((meas.eta() - 1.0).abs() < 1e-15);
        let sim = vec![vec![Cplx::new(0.5, 0.0)]];
        let (f_d, deltas) = data_consistency(&meas, &sim).unwrap();
        assert!((deltas[0][0].re - 0.75).abs() < 1e-15);
        assert!((f_d - 0.75).abs() < 1e-15);
    }

    #[test]
    fn perfect_match_zero_cost_and_zero_gradient_flag() {
        let grid = grid_n(4);
        let data: Vec<Cplx<f64>> = (0..4).map(|i| Cplx::new(1.0 + i as f64, -0.5)).collect();
        let meas = Measurements::new(
            B1Set::new(grid, vec![data.clone()]).unwrap(),
            vec![vec![1.0; 4]],
        )
        .unwrap();
        let eval = cost_and_cosensitivity(&meas, &[data], None).unwrap();
        assert!(eval.f_d < 1e-15);
        assert!(eval.grad_zero);
    }

    #[test]
    fn global_phase_invariance() {
        let grid = grid_n(5);
        let mk = |phase: f64| -> Vec<Vec<Cplx<f64>>> {
            let rot = Cplx::from_polar(1.0, phase);
            (0..3)
                .map(|l| {
                    (0..5)
                        .map(|v| Cplx::new(0.3 + (l * 5 + v) as f64 * 0.1, -0.2 + v as f64 * 0.05) * rot)
                        .collect()
                })
                .collect()
        };
        let sim: Vec<Vec<Cplx<f64>>> = (0..3)
            .map(|l| {
                (0..5)
                    .map(|v| Cplx::new(0.25 + (l * 5 + v) as f64 * 0.09, 0.1))
                    .collect()
            })
            .collect();
        let w = vec![vec![0.8; 5], vec![0.6; 5], vec![1.0; 5]];
        let m0 = Measurements::new(B1Set::new(grid.clone(), mk(0.0)).unwrap(), w.clone()).unwrap();
        let m1 = Measurements::new(B1Set::new(grid, mk(1.234)).unwrap(), w).unwrap();
        let (f0, _) = data_consistency(&m0, &sim).unwrap();
        let (f1, _) = data_consistency(&m1, &sim).unwrap();
        assert!((f0 - f1).abs() < 1e-14 * f0);
        assert!((m0.eta() - m1.eta()).abs() < 1e-14 * m0.eta());
    }

    #[test]
    fn scale_consistency_of_f_d() {
        // scaling measured and simulated by the same factor leaves f_d fixed
        let grid = grid_n(4);
        let meas_data: Vec<Cplx<f64>> = (0..4).map(|v| Cplx::new(1.0 + v as f64, 0.3)).collect();
        let sim: Vec<Cplx<f64>> = (0..4).map(|v| Cplx::new(0.8 + v as f64, -0.1)).collect();
        let w = vec![vec![1.0; 4]];
        let c = 3.7;
        let m1 = Measurements::new(B1Set::new(grid.clone(), vec![meas_data.clone()]).unwrap(), w.clone()).unwrap();
        let m2 = Measurements::new(
            B1Set::new(
                grid,
                vec![meas_data.iter().map(|&x| x * c).collect::<Vec<_>>()],
            )
            .unwrap(),
            w,
        )
        .unwrap();
        let (f1, _) = data_consistency(&m1, &vec![sim.clone()]).unwrap();
        let scaled_sim: Vec<Cplx<f64>> = sim.iter().map(|&x| x * c).collect();
        let (f2, _) = data_consistency(&m2, &vec![scaled_sim]).unwrap();
        assert!((f1 - f2).abs() < 1e-13 * f1);
    }

    #[test]
    fn shim_jacobian_matches_finite_differences() {
        // beta as a function of B: perturb B along a fixed complex direction
        // and compare against J1 dB + conj(J2 dB_bar)-style composition for
        // a real parameter path B(t) = B + t dB.
        let n = 6;
        let b: Vec<Cplx<f64>> = (0..n)
            .map(|i| Cplx::new(0.5 + i as f64 * 0.3, -0.8 + i as f64 * 0.11))
            .collect();
        let db: Vec<Cplx<f64>> = (0..n)
            .map(|i| Cplx::new(0.1 * (i as f64 - 2.0), 0.07 * (i as f64 + 1.0)))
            .collect();
        let v = 2;
        let shim = ShimJacobian::new(&b, v).unwrap();

        let beta_of = |b: &[Cplx<f64>]| -> Vec<Cplx<f64>> {
            let phi = b[v].conj() / Cplx::new(b[v].norm(), 0.0);
            b.iter().map(|&x| x * phi).collect()
        };
        let h = 1e-7;
        let bp: Vec<Cplx<f64>> = b.iter().zip(&db).map(|(&x, &d)| x + d * h).collect();
        let bm: Vec<Cplx<f64>> = b.iter().zip(&db).map(|(&x, &d)| x - d * h).collect();
        let fp = beta_of(&bp);
        let fm = beta_of(&bm);

        // d/dt beta = J1(dB) + conj(J2(dB)) for the real path parameter
        let j1 = shim.apply(&db);
        let j2 = shim.apply_conj(&db);
        for i in 0..n {
            let fd = (fp[i] - fm[i]) / Cplx::new(2.0 * h, 0.0);
            let analytic = j1[i] + j2[i].conj();
            assert!(
                (fd - analytic).norm() < 1e-6 * analytic.norm().max(1e-9),
                "component {i}: fd {fd} analytic {analytic}"
            );
        }
    }

    #[test]
    fn shim_pullback_is_transpose_of_forward_maps() {
        let n = 5;
        let b: Vec<Cplx<f64>> = (0..n)
            .map(|i| Cplx::new(1.0 + i as f64 * 0.21, 0.4 - i as f64 * 0.13))
            .collect();
        let shim = ShimJacobian::new(&b, 1).unwrap();
        let db: Vec<Cplx<f64>> = (0..n).map(|i| Cplx::new(0.3 - i as f64 * 0.05, 0.09 * i as f64)).collect();
        let a1: Vec<Cplx<f64>> = (0..n).map(|i| Cplx::new(-0.2 + i as f64 * 0.08, 0.5)).collect();
        let a2: Vec<Cplx<f64>> = (0..n).map(|i| Cplx::new(0.11 * i as f64, -0.3)).collect();
        let dot = |x: &[Cplx<f64>], y: &[Cplx<f64>]| {
            x.iter().zip(y).map(|(&u, &v)| u * v).fold(Cplx::new(0.0, 0.0), |s, t| s + t)
        };
        // <a1, J1 db> + <a2, J2 db> == <pullback(a1,a2), db>
        let lhs = dot(&a1, &shim.apply(&db)) + dot(&a2, &shim.apply_conj(&db));
        let rhs = dot(&shim.pullback(&a1, &a2), &db);
        assert!((lhs - rhs).norm() < 1e-13 * lhs.norm());
    }
}
