//! Per-channel complex calibration: estimate weights q matching measured
//! maps to simulated maps by minimizing the data-consistency cost with
//! delta_ll' = (q_l measured_l) o conj(q_l' measured_l') - sim_l o conj(sim_l').
//!
//! Internally the smooth square S/(2 eta^2) is minimized (same minimizer as
//! f_d, quadratic near zero residual); the reported residual is f_d itself,
//! normalized by the simulated-product magnitude eta.

use crate::error::{Error, Result};
use crate::forward::B1Set;
use crate::lbfgsb::{self, Bounds, LbfgsbConfig, Objective};
use crate::scalar::{real, Cplx, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationConfig {
    pub max_iters: usize,
    pub memory: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationResult<T> {
    /// One complex weight per channel, gauge-fixed so q[0] is real positive.
    pub weights: Vec<Cplx<T>>,
    /// Data-consistency residual f_d at the optimum.
    pub residual: T,
    pub iterations: usize,
}

struct CalObjective<T> {
    /// measured pair products per ordered pair (l, l'), voxelwise
    m_pairs: Vec<Vec<Cplx<T>>>,
    /// simulated pair products
    s_pairs: Vec<Vec<Cplx<T>>>,
    /// squared weight products per pair
    w_pairs: Vec<Vec<T>>,
    channels: usize,
    eta_sq: T,
}

impl<T: Real> CalObjective<T> {
    fn s_value_and_qgrad(&self, q: &[Cplx<T>]) -> (T, Vec<Cplx<T>>) {
        let l_ch = self.channels;
        let zero = Cplx::new(T::zero(), T::zero());
        let mut s_total = T::zero();
        let mut dq = vec![zero; l_ch];
        let two = T::one() + T::one();
        for l in 0..l_ch {
            for lp in 0..l_ch {
                let pair = l * l_ch + lp;
                let factor = q[l] * q[lp].conj();
                let m = &self.m_pairs[pair];
                let s = &self.s_pairs[pair];
                let w = &self.w_pairs[pair];
                let mut acc = zero;
                for v in 0..m.len() {
                    if w[v] == T::zero() {
                        continue;
                    }
                    let delta = factor * m[v] - s[v];
                    s_total += w[v] * delta.norm_sqr();
                    acc += delta.conj() * m[v] * w[v];
                }
                // dS/dq_l accumulates conj(delta) * conj(q_l') * m, doubled by
                // the (l, l') <-> (l', l) symmetry of the pair sum
                dq[l] += acc * q[lp].conj() * two;
            }
        }
        (s_total, dq)
    }
}

impl<T: Real> Objective<T> for CalObjective<T> {
    fn eval(&mut self, x: &[T], grad: Option<&mut [T]>) -> Result<T> {
        let l_ch = self.channels;
        let q: Vec<Cplx<T>> = (0..l_ch).map(|l| Cplx::new(x[l], x[l_ch + l])).collect();
        let (s, dq) = self.s_value_and_qgrad(&q);
        let denom = (T::one() + T::one()) * self.eta_sq;
        if let Some(g) = grad {
            let two = T::one() + T::one();
            for l in 0..l_ch {
                let d = dq[l] / denom;
                g[l] = two * d.re;
                g[l_ch + l] = -two * d.im;
            }
        }
        Ok(s / denom)
    }
}

/// Estimate per-channel calibration weights. `weights` are the voxel
/// data-consistency weights (zero outside the mask).
pub fn calibrate<T: Real>(
    measured: &B1Set<T>,
    simulated: &B1Set<T>,
    weights: &[Vec<T>],
    cfg: &CalibrationConfig,
) -> Result<CalibrationResult<T>> {
    let l_ch = measured.channel_count();
    if simulated.channel_count() != l_ch || l_ch == 0 {
        return Err(Error::invalid("channel counts must match and be nonzero"));
    }
    if !measured.grid.same_layout(&simulated.grid) {
        return Err(Error::invalid("measured and simulated grids differ"));
    }
    if weights.len() != l_ch {
        return Err(Error::invalid("one weight volume per channel required"));
    }
    let n = measured.grid.len();

    // channelwise magnitude scale for the initial guess
    let mut q0 = Vec::with_capacity(l_ch);
    for l in 0..l_ch {
        let mmax = measured.channels[l]
            .iter()
            .map(|c| c.norm())
            .fold(T::zero(), |a, b| a.max(b));
        let smax = simulated.channels[l]
            .iter()
            .map(|c| c.norm())
            .fold(T::zero(), |a, b| a.max(b));
        if mmax == T::zero() || smax == T::zero() {
            return Err(Error::invalid(format!("channel {l} is identically zero")));
        }
        q0.push(smax / mmax);
    }

    // precompute pair products
    let mut m_pairs = Vec::with_capacity(l_ch * l_ch);
    let mut s_pairs = Vec::with_capacity(l_ch * l_ch);
    let mut w_pairs = Vec::with_capacity(l_ch * l_ch);
    let mut eta_sq = T::zero();
    for l in 0..l_ch {
        for lp in 0..l_ch {
            let mut mp = Vec::with_capacity(n);
            let mut sp = Vec::with_capacity(n);
            let mut wp = Vec::with_capacity(n);
            for v in 0..n {
                let w = weights[l][v] * weights[lp][v];
                let w2 = w * w;
                let s = simulated.channels[l][v] * simulated.channels[lp][v].conj();
                mp.push(measured.channels[l][v] * measured.channels[lp][v].conj());
                sp.push(s);
                wp.push(w2);
                eta_sq += w2 * s.norm_sqr();
            }
            m_pairs.push(mp);
            s_pairs.push(sp);
            w_pairs.push(wp);
        }
    }
    if eta_sq == T::zero() {
        return Err(Error::invalid(
            "normalization vanishes: simulated maps are zero under the weights",
        ));
    }

    let mut obj = CalObjective {
        m_pairs,
        s_pairs,
        w_pairs,
        channels: l_ch,
        eta_sq,
    };

    let mut x0 = vec![T::zero(); 2 * l_ch];
    x0[..l_ch].copy_from_slice(&q0);
    let lcfg = LbfgsbConfig {
        memory: cfg.memory,
        max_iters: cfg.max_iters,
        grad_tol: real(1e-18),
        f_tol: T::zero(),
        ..Default::default()
    };
    let out = lbfgsb::minimize(&mut obj, x0, &Bounds::unbounded(2 * l_ch), &lcfg)?;

    let mut q: Vec<Cplx<T>> = (0..l_ch)
        .map(|l| Cplx::new(out.x[l], out.x[l_ch + l]))
        .collect();
    // gauge fix: rotate the global phase so q[0] is real positive
    let q0_norm = q[0].norm();
    if q0_norm > T::zero() {
        let rot = q[0].conj() / Cplx::new(q0_norm, T::zero());
        for v in q.iter_mut() {
            *v *= rot;
        }
    }
    let (s, _) = obj.s_value_and_qgrad(&q);
    let residual = (s / eta_sq).sqrt();
    Ok(CalibrationResult {
        weights: q,
        residual,
        iterations: out.iterations,
    })
}

/// Voltage cross-calibration scaling q' = q V_target / V_ref.
pub fn cross_calibration_scale<T: Real>(
    q: &[Cplx<T>],
    v_target: T,
    v_ref: T,
) -> Result<Vec<Cplx<T>>> {
    if !(v_ref > T::zero()) {
        return Err(Error::invalid("reference voltage must be positive"));
    }
    let s = v_target / v_ref;
    Ok(q.iter().map(|&c| c * s).collect())
}
