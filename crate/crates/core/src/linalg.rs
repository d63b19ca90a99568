//! Small dense matrices. Blocks and parameter vectors here are a handful of
//! entries wide, so everything is row-major `Vec` storage with direct loops.

use num_traits::{Float, Zero};

use crate::scalar::{Real, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Non-positive pivot at the given step of a Cholesky factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NotPositiveDefinite {
    pub pivot: usize,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|row| {
            assert_eq!(row.len(), c, "ragged rows");
            row.iter().copied()
        });
        Self { rows: r, cols: c, data: data.collect() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scaled(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    /// `A A*`.
    pub fn gram(&self) -> Self {
        let mut out = Self::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in 0..=i {
                let mut acc = T::zero();
                for k in 0..self.cols {
                    acc += self[(i, k)] * self[(j, k)];
                }
                out[(i, j)] = acc;
                out[(j, i)] = acc;
            }
        }
        out
    }

    pub fn mat_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "mat_vec shape");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
            .collect()
    }

    /// Lower Cholesky factor. A pivot whose value part is not strictly
    /// positive (or not finite) is reported as failure.
    pub fn cholesky(&self) -> Result<Cholesky<T>, NotPositiveDefinite> {
        assert_eq!(self.rows, self.cols, "cholesky needs a square matrix");
        let n = self.rows;
        let mut l = Self::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            let pivot = d.base();
            if !(pivot > T::Base::zero()) || !pivot.is_finite() {
                return Err(NotPositiveDefinite { pivot: j });
            }
            let djj = d.square_root();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Cholesky { l })
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: Matrix<T>,
}

impl<T: Real> Cholesky<T> {
    pub fn factor(&self) -> &Matrix<T> {
        &self.l
    }

    /// Solves `L w = v`.
    pub fn forward(&self, v: &[T]) -> Vec<T> {
        let n = self.l.rows;
        let mut w = v.to_vec();
        for i in 0..n {
            let mut s = w[i];
            for k in 0..i {
                s -= self.l[(i, k)] * w[k];
            }
            w[i] = s / self.l[(i, i)];
        }
        w
    }

    /// `v* S⁻¹ v`.
    pub fn quad_form(&self, v: &[T]) -> T {
        self.forward(v).into_iter().fold(T::zero(), |acc, w| acc + w * w)
    }

    pub fn log_det(&self) -> T {
        let n = self.l.rows;
        let mut acc = T::zero();
        for i in 0..n {
            acc += self.l[(i, i)].natural_log();
        }
        acc + acc
    }

    pub fn solve(&self, v: &[T]) -> Vec<T> {
        let n = self.l.rows;
        let mut w = self.forward(v);
        for i in (0..n).rev() {
            let mut s = w[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * w[k];
            }
            w[i] = s / self.l[(i, i)];
        }
        w
    }
}

/// Inverse by Gauss-Jordan with partial pivoting; `None` when a pivot
/// falls below `tiny` relative to the largest entry.
pub fn invert<F: Scalar>(a: &Matrix<F>) -> Option<Matrix<F>> {
    let n = a.rows();
    assert_eq!(n, a.cols(), "invert needs a square matrix");
    let scale = a.as_slice().iter().fold(F::zero(), |m, v| m.max(v.abs()));
    if !(scale > F::zero()) || !scale.is_finite() {
        return None;
    }
    let tiny = scale * F::epsilon() * F::of(16.0);
    let mut m = a.clone();
    let mut inv = Matrix::<F>::identity(n);
    for col in 0..n {
        let (piv, pval) = (col..n)
            .map(|r| (r, m[(r, col)].abs()))
            .fold((col, F::zero()), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(pval > tiny) {
            return None;
        }
        if piv != col {
            for j in 0..n {
                let t = m[(col, j)];
                m[(col, j)] = m[(piv, j)];
                m[(piv, j)] = t;
                let t = inv[(col, j)];
                inv[(col, j)] = inv[(piv, j)];
                inv[(piv, j)] = t;
            }
        }
        let d = m[(col, col)];
        for j in 0..n {
            m[(col, j)] /= d;
            inv[(col, j)] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[(r, col)];
            if f == F::zero() {
                continue;
            }
            for j in 0..n {
                let mv = m[(col, j)];
                let iv = inv[(col, j)];
                m[(r, j)] -= f * mv;
                inv[(r, j)] -= f * iv;
            }
        }
    }
    Some(inv)
}

/// 1-norm condition number `‖A‖₁‖A⁻¹‖₁`; infinite when singular.
pub fn condition_number<F: Scalar>(a: &Matrix<F>) -> F {
    fn norm1<F: Scalar>(m: &Matrix<F>) -> F {
        (0..m.cols())
            .map(|j| (0..m.rows()).map(|i| m[(i, j)].abs()).sum::<F>())
            .fold(F::zero(), F::max)
    }
    match invert(a) {
        Some(inv) => norm1(a) * norm1(&inv),
        None => F::infinity(),
    }
}
