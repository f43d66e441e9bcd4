//! Small dense complex linear algebra: row-major matrices, LU with partial
//! pivoting, and matrix-vector products. Sized for coil blocks (m <= a few
//! hundred), not for the volumetric operators.

use crate::error::{Error, Result};
use crate::scalar::{Cplx, Real};

/// Dense complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<Cplx<T>>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Cplx::new(T::zero(), T::zero()); rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<Cplx<T>>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Cplx<T> {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: Cplx<T>) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_to(&mut self, r: usize, c: usize, v: Cplx<T>) {
        self.data[r * self.cols + c] += v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[Cplx<T>] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = A x.
    pub fn matvec(&self, x: &[Cplx<T>]) -> Vec<Cplx<T>> {
        assert_eq!(x.len(), self.cols);
        let mut y = vec![Cplx::new(T::zero(), T::zero()); self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = Cplx::new(T::zero(), T::zero());
            for (a, b) in row.iter().zip(x) {
                acc += *a * *b;
            }
            y[r] = acc;
        }
        y
    }

    /// y = A^T x (unconjugated transpose).
    pub fn matvec_transpose(&self, x: &[Cplx<T>]) -> Vec<Cplx<T>> {
        assert_eq!(x.len(), self.rows);
        let mut y = vec![Cplx::new(T::zero(), T::zero()); self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let xr = x[r];
            for (c, a) in row.iter().enumerate() {
                y[c] += *a * xr;
            }
        }
        y
    }

    /// Maximum relative asymmetry |A - A^T| / max|A| (square matrices).
    pub fn symmetry_defect(&self) -> T {
        assert_eq!(self.rows, self.cols);
        let mut max_abs = T::zero();
        let mut max_diff = T::zero();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let a = self.get(r, c);
                max_abs = max_abs.max(a.norm());
                let d = (a - self.get(c, r)).norm();
                max_diff = max_diff.max(d);
            }
        }
        if max_abs == T::zero() {
            T::zero()
        } else {
            max_diff / max_abs
        }
    }
}

/// LU factorization with partial pivoting of a square complex matrix.
#[derive(Debug, Clone)]
pub struct LuFactor<T> {
    n: usize,
    lu: Vec<Cplx<T>>,
    piv: Vec<usize>,
}

impl<T: Real> LuFactor<T> {
    pub fn factor(a: &DenseMatrix<T>) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::invalid("LU requires a square matrix"));
        }
        let n = a.rows();
        let mut lu = a.data.clone();
        let mut piv = vec![0usize; n];
        let mut scale_max = T::zero();
        for v in lu.iter() {
            scale_max = scale_max.max(v.norm());
        }
        let tiny = scale_max * T::epsilon() * T::from_usize(n).unwrap();

        for col in 0..n {
            // pivot search
            let mut pmax = T::zero();
            let mut prow = col;
            for r in col..n {
                let m = lu[r * n + col].norm();
                if m > pmax {
                    pmax = m;
                    prow = r;
                }
            }
            if pmax <= tiny {
                return Err(Error::solver(
                    "singular matrix in LU factorization (for a coil block, consider inserting lumped loss)",
                    pmax.to_f64().unwrap_or(0.0),
                ));
            }
            piv[col] = prow;
            if prow != col {
                for c in 0..n {
                    lu.swap(col * n + c, prow * n + c);
                }
            }
            let pivot = lu[col * n + col];
            for r in col + 1..n {
                let factor = lu[r * n + col] / pivot;
                lu[r * n + col] = factor;
                for c in col + 1..n {
                    let v = lu[col * n + c];
                    lu[r * n + c] -= factor * v;
                }
            }
        }
        Ok(Self { n, lu, piv })
    }

    pub fn solve(&self, b: &[Cplx<T>]) -> Vec<Cplx<T>> {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut x = b.to_vec();
        for col in 0..n {
            x.swap(col, self.piv[col]);
        }
        // forward substitution (L has unit diagonal)
        for r in 1..n {
            let mut acc = x[r];
            for c in 0..r {
                acc -= self.lu[r * n + c] * x[c];
            }
            x[r] = acc;
        }
        // back substitution
        for r in (0..n).rev() {
            let mut acc = x[r];
            for c in r + 1..n {
                acc -= self.lu[r * n + c] * x[c];
            }
            x[r] = acc / self.lu[r * n + r];
        }
        x
    }
}

pub fn vec_norm<T: Real>(x: &[Cplx<T>]) -> T {
    x.iter().map(|c| c.norm_sqr()).fold(T::zero(), |a, b| a + b).sqrt()
}

pub fn vec_sub<T: Real>(a: &[Cplx<T>], b: &[Cplx<T>]) -> Vec<Cplx<T>> {
    a.iter().zip(b).map(|(&u, &v)| u - v).collect()
}
