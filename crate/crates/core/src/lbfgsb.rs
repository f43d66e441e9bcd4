//! Bound-constrained limited-memory BFGS: projected search directions with
//! a strong-Wolfe line search along the projected path. Iterates never leave
//! the box.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::scalar::{real, Real};

/// Box bounds; use +/- infinity for free variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds<T> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

impl<T: Real> Bounds<T> {
    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![T::neg_infinity(); n],
            upper: vec![T::infinity(); n],
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::invalid("bounds length mismatch"));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::invalid("bounds must satisfy lower <= upper"));
        }
        Ok(())
    }

    #[inline]
    pub fn project(&self, x: &mut [T]) {
        for i in 0..x.len() {
            x[i] = x[i].max(self.lower[i]).min(self.upper[i]);
        }
    }

    #[inline]
    fn clamp(&self, i: usize, v: T) -> T {
        v.max(self.lower[i]).min(self.upper[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsbConfig<T> {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when the projected-gradient infinity norm drops below this.
    pub grad_tol: T,
    /// Stop when |f_k - f_{k+1}| <= f_tol * max(|f_k|, |f_{k+1}|, 1).
    pub f_tol: T,
    pub wolfe_c1: T,
    pub wolfe_c2: T,
    pub max_line_evals: usize,
    /// Cap on the infinity norm of the very first step.
    pub max_first_step: T,
}

impl<T: Real> Default for LbfgsbConfig<T> {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 500,
            grad_tol: real(1e-12),
            f_tol: real(1e-15),
            wolfe_c1: real(1e-4),
            wolfe_c2: real(0.9),
            max_line_evals: 25,
            max_first_step: real(10.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIterations,
    GradientTolerance,
    FunctionTolerance,
    LineSearchFailure,
}

#[derive(Debug, Clone)]
pub struct Outcome<T> {
    /// Best-cost iterate encountered.
    pub x: Vec<T>,
    pub f: T,
    pub iterations: usize,
    pub stop: StopReason,
}

/// Problem interface: cost with optional gradient, plus a hook invoked at
/// every accepted iterate (including the initial point as iteration 0).
pub trait Objective<T: Real> {
    fn eval(&mut self, x: &[T], grad: Option<&mut [T]>) -> Result<T>;
    fn accepted(&mut self, _iter: usize, _x: &[T], _f: T, _g: &[T]) {}
}

/// Closure adapter for simple problems.
pub struct FnObjective<F>(pub F);

impl<T: Real, F> Objective<T> for FnObjective<F>
where
    F: FnMut(&[T], Option<&mut [T]>) -> Result<T>,
{
    fn eval(&mut self, x: &[T], grad: Option<&mut [T]>) -> Result<T> {
        (self.0)(x, grad)
    }
}

struct Pair<T> {
    s: Vec<T>,
    y: Vec<T>,
    rho: T,
}

pub fn minimize<T: Real, O: Objective<T>>(
    obj: &mut O,
    x0: Vec<T>,
    bounds: &Bounds<T>,
    cfg: &LbfgsbConfig<T>,
) -> Result<Outcome<T>> {
    let n = x0.len();
    bounds.validate(n)?;
    let mut x = x0;
    bounds.project(&mut x);

    let mut g = vec![T::zero(); n];
    let mut f = obj.eval(&x, Some(&mut g))?;
    obj.accepted(0, &x, f, &g);

    let mut best_x = x.clone();
    let mut best_f = f;
    let mut pairs: VecDeque<Pair<T>> = VecDeque::new();
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0usize;

    for iter in 1..=cfg.max_iters {
        // projected gradient convergence measure
        let mut pg_inf = T::zero();
        for i in 0..n {
            let step = bounds.clamp(i, x[i] - g[i]) - x[i];
            pg_inf = pg_inf.max(step.abs());
        }
        if pg_inf <= cfg.grad_tol {
            stop = StopReason::GradientTolerance;
            break;
        }

        let active = active_set(&x, &g, bounds);
        let mut d = two_loop_direction(&g, &active, &pairs);
        // descent safeguard
        let dg = dot(&d, &g);
        let dn = norm2(&d);
        let gn = norm2(&g);
        if !(dg < -real::<T>(1e-12) * dn * gn) || !dg.is_finite() {
            for i in 0..n {
                d[i] = if active[i] { T::zero() } else { -g[i] };
            }
        }
        let dphi0 = dot(&d, &g);
        if dphi0 >= T::zero() {
            stop = StopReason::LineSearchFailure;
            break;
        }

        let mut alpha0 = T::one();
        if pairs.is_empty() {
            let d_inf = d.iter().fold(T::zero(), |a, &v| a.max(v.abs()));
            if d_inf > T::zero() {
                alpha0 = (T::one() / norm2(&d)).min(cfg.max_first_step / d_inf);
            }
        }

        match wolfe_search(obj, &x, f, dphi0, &d, bounds, cfg, alpha0)? {
            Some(ls) => {
                let s: Vec<T> = ls.x.iter().zip(&x).map(|(&a, &b)| a - b).collect();
                let y: Vec<T> = ls.g.iter().zip(&g).map(|(&a, &b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > real::<T>(1e-10) * norm2(&s) * norm2(&y) {
                    pairs.push_back(Pair {
                        rho: T::one() / sy,
                        s,
                        y,
                    });
                    if pairs.len() > cfg.memory {
                        pairs.pop_front();
                    }
                }
                let f_prev = f;
                x = ls.x;
                g = ls.g;
                f = ls.f;
                iterations = iter;
                obj.accepted(iter, &x, f, &g);
                if f < best_f {
                    best_f = f;
                    best_x = x.clone();
                }
                let denom = f_prev.abs().max(f.abs()).max(T::one());
                if (f_prev - f).abs() <= cfg.f_tol * denom {
                    stop = StopReason::FunctionTolerance;
                    break;
                }
            }
            None => {
                stop = StopReason::LineSearchFailure;
                break;
            }
        }
    }

    Ok(Outcome {
        x: best_x,
        f: best_f,
        iterations,
        stop,
    })
}

fn active_set<T: Real>(x: &[T], g: &[T], bounds: &Bounds<T>) -> Vec<bool> {
    let mut a = vec![false; x.len()];
    for i in 0..x.len() {
        let slack_l = T::epsilon() * (T::one() + bounds.lower[i].abs());
        let slack_u = T::epsilon() * (T::one() + bounds.upper[i].abs());
        let at_lower = bounds.lower[i].is_finite() && x[i] - bounds.lower[i] <= slack_l;
        let at_upper = bounds.upper[i].is_finite() && bounds.upper[i] - x[i] <= slack_u;
        a[i] = (at_lower && g[i] > T::zero()) || (at_upper && g[i] < T::zero());
    }
    a
}

fn two_loop_direction<T: Real>(g: &[T], active: &[bool], pairs: &VecDeque<Pair<T>>) -> Vec<T> {
    let n = g.len();
    let mut q: Vec<T> = (0..n)
        .map(|i| if active[i] { T::zero() } else { g[i] })
        .collect();
    if pairs.is_empty() {
        for v in q.iter_mut() {
            *v = -*v;
        }
        return q;
    }
    let mut alphas = Vec::with_capacity(pairs.len());
    for p in pairs.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        for i in 0..n {
            q[i] -= a * p.y[i];
        }
        alphas.push(a);
    }
    let last = pairs.back().unwrap();
    let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
    for v in q.iter_mut() {
        *v = *v * gamma;
    }
    for (p, &a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = p.rho * dot(&p.y, &q);
        for i in 0..n {
            q[i] += (a - b) * p.s[i];
        }
    }
    for i in 0..n {
        q[i] = if active[i] { T::zero() } else { -q[i] };
    }
    q
}

struct LineResult<T> {
    x: Vec<T>,
    f: T,
    g: Vec<T>,
}

struct Trial<T> {
    alpha: T,
    f: T,
    dphi: T,
    x: Vec<T>,
    g: Vec<T>,
}

/// Strong-Wolfe search on phi(a) = f(P(x + a d)). The path derivative only
/// counts components strictly inside the box at the trial point.
fn wolfe_search<T: Real, O: Objective<T>>(
    obj: &mut O,
    x: &[T],
    f0: T,
    dphi0: T,
    d: &[T],
    bounds: &Bounds<T>,
    cfg: &LbfgsbConfig<T>,
    alpha0: T,
) -> Result<Option<LineResult<T>>> {
    let n = x.len();
    let mut evals = 0usize;
    let probe = |alpha: T, obj: &mut O| -> Result<Trial<T>> {
        let mut xa: Vec<T> = (0..n).map(|i| bounds.clamp(i, x[i] + alpha * d[i])).collect();
        bounds.project(&mut xa);
        let mut g = vec![T::zero(); n];
        let f = obj.eval(&xa, Some(&mut g))?;
        let mut dphi = T::zero();
        for i in 0..n {
            let interior = xa[i] > bounds.lower[i] && xa[i] < bounds.upper[i];
            if interior {
                dphi += g[i] * d[i];
            }
        }
        Ok(Trial {
            alpha,
            f,
            dphi,
            x: xa,
            g,
        })
    };

    let c1 = cfg.wolfe_c1;
    let c2 = cfg.wolfe_c2;
    let armijo = |alpha: T, f: T| f <= f0 + c1 * alpha * dphi0;
    let strong = |dphi: T| dphi.abs() <= -c2 * dphi0;

    let mut best_armijo: Option<Trial<T>> = None;
    let mut alpha = alpha0;
    let mut prev: Option<Trial<T>> = None;
    let alpha_max = real::<T>(1e10);

    // bracketing phase
    let mut bracket: Option<(Trial<T>, Trial<T>)> = None;
    while evals < cfg.max_line_evals {
        evals += 1;
        let t = probe(alpha, obj)?;
        let armijo_ok = armijo(t.alpha, t.f);
        if armijo_ok && (best_armijo.as_ref().map_or(true, |b| t.f < b.f)) {
            best_armijo = Some(Trial {
                alpha: t.alpha,
                f: t.f,
                dphi: t.dphi,
                x: t.x.clone(),
                g: t.g.clone(),
            });
        }
        if !armijo_ok || prev.as_ref().is_some_and(|p| t.f >= p.f) {
            let lo = prev.take().unwrap_or_else(|| Trial {
                alpha: T::zero(),
                f: f0,
                dphi: dphi0,
                x: x.to_vec(),
                g: Vec::new(),
            });
            bracket = Some((lo, t));
            break;
        }
        if strong(t.dphi) {
            return Ok(Some(LineResult { x: t.x, f: t.f, g: t.g }));
        }
        if t.dphi >= T::zero() {
            let p = prev.take().unwrap_or_else(|| Trial {
                alpha: T::zero(),
                f: f0,
                dphi: dphi0,
                x: x.to_vec(),
                g: Vec::new(),
            });
            bracket = Some((t, p));
            break;
        }
        let next = (alpha * real::<T>(2.0)).min(alpha_max);
        if next == alpha {
            break;
        }
        prev = Some(t);
        alpha = next;
    }

    // zoom phase
    if let Some((mut lo, mut hi)) = bracket {
        while evals < cfg.max_line_evals {
            evals += 1;
            // quadratic interpolation from lo, guarded toward the interval interior
            let span = hi.alpha - lo.alpha;
            let mut a_try = lo.alpha + span * real::<T>(0.5);
            if lo.dphi != T::zero() && !lo.g.is_empty() {
                let denom = lo.f - hi.f + lo.dphi * span;
                if denom.abs() > T::epsilon() {
                    let q = lo.alpha + lo.dphi * span * span / (real::<T>(2.0) * denom);
                    let lo_guard = lo.alpha + span * real::<T>(0.1);
                    let hi_guard = hi.alpha - span * real::<T>(0.1);
                    if (q - lo_guard) * (hi_guard - q) > T::zero() {
                        a_try = q;
                    }
                }
            }
            let t = probe(a_try, obj)?;
            let armijo_ok = armijo(t.alpha, t.f);
            if armijo_ok && (best_armijo.as_ref().map_or(true, |b| t.f < b.f)) {
                best_armijo = Some(Trial {
                    alpha: t.alpha,
                    f: t.f,
                    dphi: t.dphi,
                    x: t.x.clone(),
                    g: t.g.clone(),
                });
            }
            if !armijo_ok || t.f >= lo.f {
                hi = t;
            } else {
                if strong(t.dphi) {
                    return Ok(Some(LineResult { x: t.x, f: t.f, g: t.g }));
                }
                if t.dphi * (hi.alpha - lo.alpha) >= T::zero() {
                    hi = Trial {
                        alpha: lo.alpha,
                        f: lo.f,
                        dphi: lo.dphi,
                        x: lo.x.clone(),
                        g: lo.g.clone(),
                    };
                }
                lo = t;
            }
            if (hi.alpha - lo.alpha).abs() <= real::<T>(1e-14) * lo.alpha.abs().max(T::one()) {
                break;
            }
        }
    }

    // fallback: best Armijo point seen, if any
    match best_armijo {
        Some(t) if !t.g.is_empty() => Ok(Some(LineResult { x: t.x, f: t.f, g: t.g })),
        _ => Ok(None),
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).fold(T::zero(), |s, t| s + t)
}

#[inline]
fn norm2<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;

    impl Objective<f64> for Rosenbrock {
        fn eval(&mut self, x: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
            let n = x.len();
            let mut f = 0.0;
            if let Some(g) = grad {
                g.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..n - 1 {
                    let a = x[i + 1] - x[i] * x[i];
                    let b = 1.0 - x[i];
                    f += 100.0 * a * a + b * b;
                    g[i] += -400.0 * x[i] * a - 2.0 * b;
                    g[i + 1] += 200.0 * a;
                }
            } else {
                for i in 0..n - 1 {
                    let a = x[i + 1] - x[i] * x[i];
                    let b = 1.0 - x[i];
                    f += 100.0 * a * a + b * b;
                }
            }
            Ok(f)
        }
    }

    #[test]
    fn unbounded_rosenbrock_converges() {
        let n = 6;
        let x0 = vec![-1.2, 1.0, -0.5, 0.8, 2.0, -1.0];
        let cfg = LbfgsbConfig {
            max_iters: 500,
            grad_tol: 1e-10,
            ..Default::default()
        };
        let out = minimize(&mut Rosenbrock, x0, &Bounds::unbounded(n), &cfg).unwrap();
        assert!(out.f < 1e-14, "f = {}", out.f);
        for v in &out.x {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    struct Quadratic {
        center: Vec<f64>,
        scale: Vec<f64>,
    }

    impl Objective<f64> for Quadratic {
        fn eval(&mut self, x: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
            let mut f = 0.0;
            for i in 0..x.len() {
                let d = x[i] - self.center[i];
                f += 0.5 * self.scale[i] * d * d;
            }
            if let Some(g) = grad {
                for i in 0..x.len() {
                    g[i] = self.scale[i] * (x[i] - self.center[i]);
                }
            }
            Ok(f)
        }
    }

    #[test]
    fn active_bounds_found_exactly() {
        // unconstrained minimum outside the box: solution pinned at bounds
        let mut q = Quadratic {
            center: vec![5.0, -3.0, 0.5],
            scale: vec![1.0, 10.0, 100.0],
        };
        let bounds = Bounds {
            lower: vec![0.0, 0.0, 0.0],
            upper: vec![2.0, 2.0, 2.0],
        };
        let cfg = LbfgsbConfig {
            max_iters: 200,
            grad_tol: 1e-12,
            ..Default::default()
        };
        let out = minimize(&mut q, vec![1.0, 1.0, 1.0], &bounds, &cfg).unwrap();
        assert!((out.x[0] - 2.0).abs() < 1e-10);
        assert!((out.x[1] - 0.0).abs() < 1e-10);
        assert!((out.x[2] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn iterates_never_violate_bounds() {
        struct Watcher {
            inner: Rosenbrock,
            lower: Vec<f64>,
            upper: Vec<f64>,
        }
        impl Objective<f64> for Watcher {
            fn eval(&mut self, x: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
                for i in 0..x.len() {
                    assert!(x[i] >= self.lower[i] - 1e-15 && x[i] <= self.upper[i] + 1e-15);
                }
                self.inner.eval(x, grad)
            }
        }
        let lower = vec![-0.5; 4];
        let upper = vec![0.9; 4];
        let mut w = Watcher {
            inner: Rosenbrock,
            lower: lower.clone(),
            upper: upper.clone(),
        };
        let bounds = Bounds { lower, upper };
        let cfg = LbfgsbConfig {
            max_iters: 150,
            ..Default::default()
        };
        let out = minimize(&mut w, vec![0.0; 4], &bounds, &cfg).unwrap();
        // constrained optimum sits at the upper bound in x0..x2
        assert!(out.x.iter().all(|&v| (-0.5..=0.9).contains(&v)));
    }

    #[test]
    fn zero_iterations_returns_initial() {
        let mut q = Quadratic {
            center: vec![1.0, 1.0],
            scale: vec![1.0, 1.0],
        };
        let cfg = LbfgsbConfig {
            max_iters: 0,
            ..Default::default()
        };
        let out = minimize(&mut q, vec![0.3, -0.2], &Bounds::unbounded(2), &cfg).unwrap();
        assert_eq!(out.x, vec![0.3, -0.2]);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn accepted_hook_sees_monotone_best() {
        struct Tracked {
            inner: Rosenbrock,
            fs: Vec<f64>,
        }
        impl Objective<f64> for Tracked {
            fn eval(&mut self, x: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
                self.inner.eval(x, grad)
            }
            fn accepted(&mut self, _iter: usize, _x: &[f64], f: f64, _g: &[f64]) {
                self.fs.push(f);
            }
        }
        let mut t = Tracked {
            inner: Rosenbrock,
            fs: Vec::new(),
        };
        let cfg = LbfgsbConfig {
            max_iters: 60,
            ..Default::default()
        };
        let _ = minimize(&mut t, vec![-1.2, 1.0], &Bounds::unbounded(2), &cfg).unwrap();
        // best-so-far sequence is non-increasing
        let mut best = f64::INFINITY;
        for &f in &t.fs {
            best = best.min(f);
            assert!(f >= best - 1e-15);
        }
        assert!(t.fs.len() > 3);
    }
}
