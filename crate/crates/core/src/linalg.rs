//! Dense symmetric positive-definite matrix primitives.
//!
//! Everything here is row-major and unblocked: the matrices this crate
//! factorizes are correlation and covariance matrices over a mini-batch
//! horizon, which stays well below a hundred rows.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Jitter values tried, in order, after the caller's jitter fails.
const JITTER_LADDER: [f64; 3] = [1e-10, 1e-8, 1e-6];

/// Square symmetric matrix in dense row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix<T> {
    dim: usize,
    entries: Vec<T>,
}

impl<T: Scalar> SymMatrix<T> {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "matrix dimension must be at least 1");
        Self { dim, entries: vec![T::zero(); dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.entries[i * dim + i] = T::one();
        }
        m
    }

    /// Builds a matrix from row-major entries, rejecting any asymmetry.
    pub fn from_row_major(dim: usize, entries: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        if entries.len() != dim * dim {
            return Err(Error::DimensionMismatch { expected: dim * dim, got: entries.len() });
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                if entries[i * dim + j] != entries[j * dim + i] {
                    return Err(Error::NotSymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.len();
        let mut entries = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: row.len() });
            }
            entries.extend_from_slice(row);
        }
        Self::from_row_major(dim, entries)
    }

    /// Builds a matrix by evaluating `f(i, j)` on the upper triangle and mirroring.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                m.entries[i * dim + j] = v;
                m.entries[j * dim + i] = v;
            }
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[i * self.dim + j]
    }

    /// Sets both `(i, j)` and `(j, i)`.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.entries[i * self.dim + j] = v;
        self.entries[j * self.dim + i] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.entries
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    /// Principal submatrix over the contiguous index range `start..start + len`.
    pub fn principal(&self, start: usize, len: usize) -> Self {
        assert!(len >= 1 && start + len <= self.dim, "principal block out of range");
        Self::from_fn(len, |i, j| self.get(start + i, start + j))
    }

    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok((0..self.dim).map(|i| dot(self.row(i), x)).collect())
    }

    /// Entrywise `self + alpha * other`.
    pub fn add_scaled(&mut self, alpha: T, other: &Self) {
        assert_eq!(self.dim, other.dim);
        for (a, &b) in self.entries.iter_mut().zip(&other.entries) {
            *a += alpha * b;
        }
    }

    pub fn frobenius_norm(&self) -> T {
        self.entries.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = S + jitter·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor<T> {
    dim: usize,
    lower: Vec<T>,
    jitter: T,
}

impl<T: Scalar> CholFactor<T> {
    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        if j > i {
            T::zero()
        } else {
            self.lower[i * self.dim + j]
        }
    }

    /// Diagonal jitter that was added to make the factorization succeed.
    pub fn jitter(&self) -> T {
        self.jitter
    }

    /// Reconstructs `L·Lᵀ`.
    pub fn reconstruct(&self) -> SymMatrix<T> {
        let n = self.dim;
        SymMatrix::from_fn(n, |i, j| {
            let k_max = i.min(j);
            (0..=k_max).fold(T::zero(), |acc, k| acc + self.get(i, k) * self.get(j, k))
        })
    }

    /// Solves `L·y = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [T]) -> Result<()> {
        self.check_len(b.len())?;
        let n = self.dim;
        for i in 0..n {
            let row = &self.lower[i * n..i * n + i];
            let s = b[i] - dot(row, &b[..i]);
            b[i] = s / self.lower[i * n + i];
        }
        Ok(())
    }

    /// Solves `Lᵀ·x = y` in place.
    pub fn solve_upper_in_place(&self, y: &mut [T]) -> Result<()> {
        self.check_len(y.len())?;
        let n = self.dim;
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.lower[k * n + i] * y[k];
            }
            y[i] = s / self.lower[i * n + i];
        }
        Ok(())
    }

    /// Explicit inverse `(L·Lᵀ)⁻¹`, column by column.
    pub fn inverse(&self) -> SymMatrix<T> {
        let n = self.dim;
        let mut inv = SymMatrix::zeros(n);
        let mut col = vec![T::zero(); n];
        for j in 0..n {
            col.iter_mut().for_each(|c| *c = T::zero());
            col[j] = T::one();
            self.solve_lower_in_place(&mut col).expect("dimension checked");
            self.solve_upper_in_place(&mut col).expect("dimension checked");
            for i in j..n {
                inv.set(i, j, col[i]);
            }
        }
        inv
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim {
            Err(Error::DimensionMismatch { expected: self.dim, got: len })
        } else {
            Ok(())
        }
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn try_factor<T: Scalar>(s: &SymMatrix<T>, jitter: T) -> std::result::Result<CholFactor<T>, (usize, T)> {
    let n = s.dim;
    let mut l = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let partial = dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            if i == j {
                let pivot = s.get(i, i) + jitter - partial;
                if !(pivot > T::zero()) || !pivot.is_finite() {
                    return Err((i, pivot));
                }
                l[i * n + i] = pivot.sqrt();
            } else {
                l[i * n + j] = (s.get(i, j) - partial) / l[j * n + j];
            }
        }
    }
    Ok(CholFactor { dim: n, lower: l, jitter })
}

/// Cholesky factorization of `s + jitter·I`.
///
/// On a non-positive pivot the factorization is retried with the larger of the
/// caller's jitter and each of `1e-10`, `1e-8`, `1e-6` before giving up.
pub fn cholesky<T: Scalar>(s: &SymMatrix<T>, jitter: T) -> Result<CholFactor<T>> {
    let mut last = match try_factor(s, jitter) {
        Ok(f) => return Ok(f),
        Err(fail) => (fail, jitter),
    };
    for &step in &JITTER_LADDER {
        let j = T::of(step);
        if j <= jitter {
            continue;
        }
        match try_factor(s, j) {
            Ok(f) => return Ok(f),
            Err(fail) => last = (fail, j),
        }
    }
    let ((row, pivot), jitter) = last;
    Err(Error::NotPositiveDefinite { row, pivot: pivot.as_f64(), jitter: jitter.as_f64() })
}

/// Solves `(L·Lᵀ)·x = b`.
pub fn chol_solve<T: Scalar>(l: &CholFactor<T>, b: &[T]) -> Result<Vec<T>> {
    let mut x = b.to_vec();
    l.solve_lower_in_place(&mut x)?;
    l.solve_upper_in_place(&mut x)?;
    Ok(x)
}

/// `log det(L·Lᵀ) = 2·Σ log L_ii`.
pub fn log_det<T: Scalar>(l: &CholFactor<T>) -> T {
    let two = T::one() + T::one();
    (0..l.dim).fold(T::zero(), |acc, i| acc + l.get(i, i).ln()) * two
}

/// `rᵀ·(L·Lᵀ)⁻¹·r`, computed as `‖L⁻¹r‖²`.
pub fn quad_form<T: Scalar>(l: &CholFactor<T>, r: &[T]) -> Result<T> {
    let mut y = r.to_vec();
    l.solve_lower_in_place(&mut y)?;
    Ok(dot(&y, &y))
}
