//! Small dense symmetric-matrix kernels for the quadratic problem suites.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vecmath::Vector;

/// Dense square matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<S> {
    n: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(n: usize) -> Self {
        Matrix {
            n,
            data: vec![S::zero(); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, S::one());
        }
        m
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidProblem("matrix must be square".into()));
        }
        Ok(Matrix {
            n,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    /// `GᵀG + ridge·I` for a square `g`.
    pub fn gram_plus_ridge(g: &Matrix<S>, ridge: S) -> Self {
        let n = g.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in i..n {
                let mut acc = S::zero();
                for k in 0..n {
                    acc += g.get(k, i) * g.get(k, j);
                }
                if i == j {
                    acc += ridge;
                }
                out.set(i, j, acc);
                out.set(j, i, acc);
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.n + j] = v;
    }

    pub fn is_symmetric(&self, tol: S) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matvec(&self, x: &Vector<S>) -> Vector<S> {
        assert_eq!(self.n, x.dim(), "dimension mismatch");
        let xs = x.as_slice();
        let mut out = Vector::zeros(self.n);
        for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
            let row = &self.data[i * self.n..(i + 1) * self.n];
            *o = row.iter().zip(xs).map(|(&a, &b)| a * b).sum();
        }
        out
    }

    /// `self += a * other`
    pub fn add_scaled(&mut self, a: S, other: &Matrix<S>) {
        assert_eq!(self.n, other.n, "dimension mismatch");
        for (s, &o) in self.data.iter_mut().zip(&other.data) {
            *s += a * o;
        }
    }

    pub fn scale(&self, a: S) -> Self {
        Matrix {
            n: self.n,
            data: self.data.iter().map(|&v| v * a).collect(),
        }
    }

    /// Solves `self · x = b` for symmetric positive definite `self` by Cholesky.
    pub fn solve_spd(&self, b: &Vector<S>) -> Result<Vector<S>> {
        let n = self.n;
        let mut l = vec![S::zero(); n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = self.get(i, j);
                for k in 0..j {
                    sum -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if sum <= S::zero() || !sum.is_finite() {
                        return Err(Error::InvalidProblem(
                            "aggregate curvature is not positive definite".into(),
                        ));
                    }
                    l[i * n + i] = sum.sqrt();
                } else {
                    l[i * n + j] = sum / l[j * n + j];
                }
            }
        }
        let mut y = vec![S::zero(); n];
        for i in 0..n {
            let mut sum = b[i];
            for k in 0..i {
                sum -= l[i * n + k] * y[k];
            }
            y[i] = sum / l[i * n + i];
        }
        let mut x = vec![S::zero(); n];
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in i + 1..n {
                sum -= l[k * n + i] * x[k];
            }
            x[i] = sum / l[i * n + i];
        }
        Vector::from_vec(x)
    }

    /// All eigenvalues of a symmetric matrix (cyclic Jacobi), ascending.
    pub fn symmetric_eigenvalues(&self) -> Vec<S> {
        let n = self.n;
        let mut a = self.data.clone();
        let eps = S::epsilon();
        for _sweep in 0..100 {
            let mut off = S::zero();
            let mut diag = S::zero();
            for i in 0..n {
                diag += a[i * n + i] * a[i * n + i];
                for j in 0..n {
                    if i != j {
                        off += a[i * n + j] * a[i * n + j];
                    }
                }
            }
            if off <= eps * eps * diag.max(S::min_positive_value()) {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq.is_zero() {
                        continue;
                    }
                    let app = a[p * n + p];
                    let aqq = a[q * n + q];
                    let theta = (aqq - app) / (S::lit(2.0) * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + S::one()).sqrt());
                    let c = S::one() / (t * t + S::one()).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut eig: Vec<S> = (0..n).map(|i| a[i * n + i]).collect();
        eig.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
        eig
    }
}
