//! Small dense linear algebra, generic over [`Scalar`].
//!
//! Everything here works on row-major matrices sized by GLM designs
//! (n rows, a handful of columns), so plain loops are fast enough and
//! keep the crate free of a linear-algebra backend.

use crate::scalar::{cast, Scalar};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Builds from row-major data. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
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
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Keeps the given columns, in the given order.
    pub fn select_columns(&self, keep: &[usize]) -> Matrix<T> {
        let mut out = Matrix::zeros(self.rows, keep.len());
        for i in 0..self.rows {
            for (jj, &j) in keep.iter().enumerate() {
                out.set(i, jj, self.get(i, j));
            }
        }
        out
    }

    /// `A x`.
    pub fn mat_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(x)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect()
    }

    /// `Aᵀ x`.
    pub fn mat_t_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            for (j, o) in out.iter_mut().enumerate() {
                *o = *o + self.get(i, j) * xi;
            }
        }
        out
    }
}

fn norm2<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

/// Thin Householder QR of an n×p matrix with n ≥ p.
///
/// `compute` returns `None` when the matrix is (numerically) rank
/// deficient; callers are expected to filter columns first.
pub struct QrFactor<T> {
    n: usize,
    p: usize,
    // Reflector vectors in the lower triangle (including the diagonal
    // slot), R's strict upper triangle above them.
    w: Matrix<T>,
    rdiag: Vec<T>,
    taus: Vec<T>,
}

impl<T: Scalar> QrFactor<T> {
    pub fn compute(a: &Matrix<T>) -> Option<Self> {
        let (n, p) = (a.rows(), a.cols());
        if n < p || p == 0 {
            return None;
        }
        let mut w = a.clone();
        let mut rdiag = vec![T::zero(); p];
        let mut taus = vec![T::zero(); p];
        let rel_tol = T::epsilon().sqrt();

        for k in 0..p {
            let col_norm = {
                let mut s = T::zero();
                for i in k..n {
                    let v = w.get(i, k);
                    s = s + v * v;
                }
                s.sqrt()
            };
            // Column norm of the original matrix, for a scale-aware
            // deficiency test.
            let orig_norm = norm2(&a.column(k));
            if col_norm <= rel_tol * orig_norm || orig_norm == T::zero() {
                return None;
            }
            let x0 = w.get(k, k);
            let alpha = if x0 >= T::zero() {
                -col_norm
            } else {
                col_norm
            };
            let v0 = x0 - alpha;
            w.set(k, k, v0);
            let mut vtv = T::zero();
            for i in k..n {
                let v = w.get(i, k);
                vtv = vtv + v * v;
            }
            let tau = cast::<T>(2.0) / vtv;
            taus[k] = tau;
            rdiag[k] = alpha;
            for j in k + 1..p {
                let mut s = T::zero();
                for i in k..n {
                    s = s + w.get(i, k) * w.get(i, j);
                }
                s = s * tau;
                for i in k..n {
                    let v = w.get(i, j) - s * w.get(i, k);
                    w.set(i, j, v);
                }
            }
        }
        Some(QrFactor {
            n,
            p,
            w,
            rdiag,
            taus,
        })
    }

    fn r_entry(&self, i: usize, j: usize) -> T {
        if i == j {
            self.rdiag[i]
        } else if i < j {
            self.w.get(i, j)
        } else {
            T::zero()
        }
    }

    /// Least-squares solution of `min ‖A β − b‖`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        assert_eq!(b.len(), self.n);
        let mut qtb = b.to_vec();
        for k in 0..self.p {
            let mut s = T::zero();
            for i in k..self.n {
                s = s + self.w.get(i, k) * qtb[i];
            }
            s = s * self.taus[k];
            for i in k..self.n {
                qtb[i] = qtb[i] - s * self.w.get(i, k);
            }
        }
        // Back substitution on R β = (Qᵀb)[..p].
        let mut beta = vec![T::zero(); self.p];
        for i in (0..self.p).rev() {
            let mut s = qtb[i];
            for j in i + 1..self.p {
                s = s - self.r_entry(i, j) * beta[j];
            }
            beta[i] = s / self.rdiag[i];
        }
        beta
    }

    /// Diagonal of the hat matrix `A (AᵀA)⁻¹ Aᵀ`, i.e. squared row norms
    /// of the thin Q factor.
    pub fn hat_diagonals(&self) -> Vec<T> {
        // Build Q1 by applying the reflectors in reverse to [I_p; 0].
        let mut q = Matrix::zeros(self.n, self.p);
        for j in 0..self.p {
            q.set(j, j, T::one());
        }
        for k in (0..self.p).rev() {
            for j in 0..self.p {
                let mut s = T::zero();
                for i in k..self.n {
                    s = s + self.w.get(i, k) * q.get(i, j);
                }
                s = s * self.taus[k];
                for i in k..self.n {
                    let v = q.get(i, j) - s * self.w.get(i, k);
                    q.set(i, j, v);
                }
            }
        }
        (0..self.n)
            .map(|i| q.row(i).iter().fold(T::zero(), |acc, &x| acc + x * x))
            .collect()
    }

    /// Diagonal of `(AᵀA)⁻¹ = R⁻¹R⁻ᵀ`.
    pub fn xtx_inverse_diag(&self) -> Vec<T> {
        (0..self.p)
            .map(|j| {
                // Forward substitution on Rᵀ z = e_j (Rᵀ is lower triangular).
                let mut z = vec![T::zero(); self.p];
                for i in 0..self.p {
                    let mut s = if i == j { T::one() } else { T::zero() };
                    for l in 0..i {
                        s = s - self.r_entry(l, i) * z[l];
                    }
                    z[i] = s / self.rdiag[i];
                }
                z.iter().fold(T::zero(), |acc, &x| acc + x * x)
            })
            .collect()
    }

    /// `ln det(AᵀA) = 2 Σ ln |r_kk|`.
    pub fn log_det_xtx(&self) -> T {
        self.rdiag
            .iter()
            .fold(T::zero(), |acc, &r| acc + r.abs().ln())
            * cast::<T>(2.0)
    }
}

/// Indices of a maximal independent column subset, scanned left to right
/// so that later-indexed columns lose against earlier duplicates.
pub fn independent_columns<T: Scalar>(a: &Matrix<T>) -> Vec<usize> {
    let rel_tol = T::epsilon().sqrt();
    let mut basis: Vec<Vec<T>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..a.cols() {
        let mut v = a.column(j);
        let orig = norm2(&v);
        if orig == T::zero() {
            continue;
        }
        // Two projection passes keep the basis orthonormal enough.
        for _ in 0..2 {
            for q in &basis {
                let dot = v
                    .iter()
                    .zip(q)
                    .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi = *vi - dot * *qi;
                }
            }
        }
        let resid = norm2(&v);
        if resid > rel_tol * orig {
            for vi in v.iter_mut() {
                *vi = *vi / resid;
            }
            basis.push(v);
            keep.push(j);
        }
    }
    keep
}

/// Solves the symmetric positive-definite system `A x = b` by Cholesky.
/// Returns `None` when A is not positive definite.
pub fn cholesky_solve<T: Scalar>(a: &Matrix<T>, b: &[T]) -> Option<Vec<T>> {
    let l = cholesky_factor(a)?;
    let n = b.len();
    // L y = b
    let mut y = vec![T::zero(); n];
    for i in 0..n {
        let mut s = b[i];
        for j in 0..i {
            s = s - l.get(i, j) * y[j];
        }
        y[i] = s / l.get(i, i);
    }
    // Lᵀ x = y
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for j in i + 1..n {
            s = s - l.get(j, i) * x[j];
        }
        x[i] = s / l.get(i, i);
    }
    Some(x)
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn cholesky_inverse<T: Scalar>(a: &Matrix<T>) -> Option<Matrix<T>> {
    let n = a.rows();
    let mut inv = Matrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![T::zero(); n];
        e[j] = T::one();
        let col = cholesky_solve(a, &e)?;
        for i in 0..n {
            inv.set(i, j, col[i]);
        }
    }
    Some(inv)
}

fn cholesky_factor<T: Scalar>(a: &Matrix<T>) -> Option<Matrix<T>> {
    let n = a.rows();
    if n != a.cols() {
        return None;
    }
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s = s - l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= T::zero() {
                    return None;
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Some(l)
}
