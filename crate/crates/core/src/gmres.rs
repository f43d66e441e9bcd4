//! Restarted GMRES for complex non-Hermitian systems with optional right
//! diagonal (Jacobi) preconditioning. The reported residual is the true
//! relative residual of the unpreconditioned system.

use crate::error::{Error, Result};
use crate::linalg::vec_norm;
use crate::scalar::{Cplx, Real};

/// Matrix-free linear operator.
pub trait LinOp<T: Real> {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[Cplx<T>], y: &mut [Cplx<T>]);
}

#[derive(Debug, Clone, Copy)]
pub struct GmresStats<T> {
    pub iterations: usize,
    pub residual: T,
    pub converged: bool,
}

/// Diagonal (Jacobi) preconditioner as an operator.
pub struct DiagPrecond<T>(pub Vec<Cplx<T>>);

impl<T: Real> LinOp<T> for DiagPrecond<T> {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn apply(&self, x: &[Cplx<T>], y: &mut [Cplx<T>]) {
        for i in 0..x.len() {
            y[i] = x[i] * self.0[i];
        }
    }
}

/// Solve A x = b with restarted GMRES. `x` carries the initial guess in and
/// the solution out. `precond` applies an approximate inverse on the right.
pub fn solve_gmres<T: Real, A: LinOp<T> + ?Sized>(
    op: &A,
    b: &[Cplx<T>],
    x: &mut [Cplx<T>],
    precond: Option<&dyn LinOp<T>>,
    tol: T,
    max_iters: usize,
    restart: usize,
) -> Result<GmresStats<T>> {
    let n = op.dim();
    assert_eq!(b.len(), n);
    assert_eq!(x.len(), n);
    if let Some(m) = precond {
        assert_eq!(m.dim(), n);
    }
    let zero = Cplx::new(T::zero(), T::zero());

    let b_norm = vec_norm(b);
    if b_norm == T::zero() {
        x.fill(zero);
        return Ok(GmresStats {
            iterations: 0,
            residual: T::zero(),
            converged: true,
        });
    }

    let apply_prec = |v: &[Cplx<T>], out: &mut Vec<Cplx<T>>| {
        out.clear();
        match precond {
            Some(m) => {
                out.resize(n, zero);
                m.apply(v, out);
            }
            None => out.extend_from_slice(v),
        }
    };

    let m = restart.max(1).min(n);
    let mut total_iters = 0usize;
    let mut ax = vec![zero; n];
    let residual;

    // outer restart loop
    loop {
        op.apply(x, &mut ax);
        let mut r: Vec<Cplx<T>> = b.iter().zip(&ax).map(|(&bi, &ai)| bi - ai).collect();
        let r_norm = vec_norm(&r);
        let rel = r_norm / b_norm;
        if rel <= tol {
            return Ok(GmresStats {
                iterations: total_iters,
                residual: rel,
                converged: true,
            });
        }
        if total_iters >= max_iters {
            residual = rel;
            break;
        }

        // Arnoldi with modified Gram-Schmidt in the right-preconditioned space
        let inv = T::one() / r_norm;
        for v in r.iter_mut() {
            *v = *v * inv;
        }
        let mut basis: Vec<Vec<Cplx<T>>> = vec![r];
        let mut h: Vec<Vec<Cplx<T>>> = Vec::new(); // h[k] has k+2 entries
        let mut g = vec![zero; m + 1];
        g[0] = Cplx::new(r_norm, T::zero());
        let mut cs: Vec<Cplx<T>> = Vec::new();
        let mut sn: Vec<Cplx<T>> = Vec::new();
        let mut k_used = 0usize;
        let mut pv = Vec::with_capacity(n);

        for k in 0..m {
            if total_iters >= max_iters {
                break;
            }
            total_iters += 1;
            apply_prec(&basis[k], &mut pv);
            let mut w = vec![zero; n];
            op.apply(&pv, &mut w);

            let mut hk = vec![zero; k + 2];
            for (j, vj) in basis.iter().enumerate().take(k + 1) {
                let mut dot = zero;
                for i in 0..n {
                    dot += vj[i].conj() * w[i];
                }
                hk[j] = dot;
                for i in 0..n {
                    w[i] -= dot * vj[i];
                }
            }
            let w_norm = vec_norm(&w);
            hk[k + 1] = Cplx::new(w_norm, T::zero());

            // apply accumulated Givens rotations
            for j in 0..k {
                let t = cs[j].conj() * hk[j] + sn[j].conj() * hk[j + 1];
                hk[j + 1] = -sn[j] * hk[j] + cs[j] * hk[j + 1];
                hk[j] = t;
            }
            // new rotation eliminating hk[k+1]
            let (c, s) = givens(hk[k], hk[k + 1]);
            let t = c.conj() * hk[k] + s.conj() * hk[k + 1];
            hk[k] = t;
            hk[k + 1] = zero;
            let gk = g[k];
            g[k] = c.conj() * gk;
            g[k + 1] = -s * gk;
            cs.push(c);
            sn.push(s);
            h.push(hk);
            k_used = k + 1;

            let est = g[k + 1].norm() / b_norm;
            let breakdown = w_norm < T::epsilon() * b_norm;
            if !breakdown {
                let inv_w = T::one() / w_norm;
                let vk: Vec<Cplx<T>> = w.iter().map(|&c| c * inv_w).collect();
                basis.push(vk);
            }
            if est <= tol * T::from_f64(0.5).unwrap() || breakdown {
                break;
            }
        }

        if k_used == 0 {
            residual = rel;
            break;
        }
        // solve the small triangular system h y = g
        let mut y = vec![zero; k_used];
        for row in (0..k_used).rev() {
            let mut acc = g[row];
            for col in row + 1..k_used {
                acc -= h[col][row] * y[col];
            }
            y[row] = acc / h[row][row];
        }
        // x += M^{-1} (V y)
        let mut update = vec![zero; n];
        for (col, yc) in y.iter().enumerate() {
            let v = &basis[col];
            for i in 0..n {
                update[i] += v[i] * *yc;
            }
        }
        apply_prec(&update, &mut pv);
        for i in 0..n {
            x[i] += pv[i];
        }
    }

    Ok(GmresStats {
        iterations: total_iters,
        residual,
        converged: residual <= tol,
    })
}

/// Convenience wrapper returning an error on non-convergence.
pub fn solve_gmres_strict<T: Real, A: LinOp<T> + ?Sized>(
    op: &A,
    b: &[Cplx<T>],
    x: &mut [Cplx<T>],
    precond: Option<&dyn LinOp<T>>,
    tol: T,
    max_iters: usize,
    restart: usize,
    context: &str,
) -> Result<GmresStats<T>> {
    let stats = solve_gmres(op, b, x, precond, tol, max_iters, restart)?;
    if !stats.converged {
        return Err(Error::solver(
            format!("{context}: GMRES did not converge within {max_iters} iterations"),
            stats.residual.to_f64().unwrap_or(f64::NAN),
        ));
    }
    Ok(stats)
}

fn givens<T: Real>(a: Cplx<T>, b: Cplx<T>) -> (Cplx<T>, Cplx<T>) {
    let bn = b.norm();
    if bn == T::zero() {
        return (Cplx::new(T::one(), T::zero()), Cplx::new(T::zero(), T::zero()));
    }
    let an = a.norm();
    let denom = (an * an + bn * bn).sqrt();
    if an == T::zero() {
        return (Cplx::new(T::zero(), T::zero()), Cplx::new(T::one(), T::zero()));
    }
    let c = Cplx::new(an / denom, T::zero());
    let s = (a / Cplx::new(an, T::zero())) * (b.conj() / Cplx::new(denom, T::zero()));
    (c, s.conj())
}
