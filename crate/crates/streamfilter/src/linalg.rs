//! Small dense and tridiagonal linear algebra helpers.
//!
//! The exact posterior of the state-space model has a tridiagonal precision
//! matrix, so everything it needs is an O(t) symmetric tridiagonal Cholesky.
//! The dense routines back proposal covariances, which are tiny (t <= a few
//! dozen) in every experiment here.

use crate::error::{Error, Result};

/// Cholesky factor of a symmetric positive-definite tridiagonal matrix.
///
/// `diag` holds the factor's diagonal, `sub` its single subdiagonal, so a
/// solve or a draw is two bidiagonal sweeps.
#[derive(Clone, Debug)]
pub struct TridiagCholesky {
    diag: Vec<f64>,
    sub: Vec<f64>,
}

impl TridiagCholesky {
    /// Factor the matrix with diagonal `d` and symmetric off-diagonal `e`
    /// (`e.len() == d.len() - 1`).
    pub fn factor(d: &[f64], e: &[f64]) -> Result<Self> {
        if d.is_empty() || e.len() + 1 != d.len() {
            return Err(Error::contract("tridiagonal dimensions inconsistent"));
        }
        let n = d.len();
        let mut diag = vec![0.0; n];
        let mut sub = vec![0.0; n.saturating_sub(1)];
        let mut pivot = d[0];
        for i in 0..n {
            if pivot <= 0.0 || !pivot.is_finite() {
                return Err(Error::contract(format!(
                    "matrix not positive definite at pivot {i}"
                )));
            }
            diag[i] = pivot.sqrt();
            if i + 1 < n {
                sub[i] = e[i] / diag[i];
                pivot = d[i + 1] - sub[i] * sub[i];
            }
        }
        Ok(TridiagCholesky { diag, sub })
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// Solve `Q x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut x = vec![0.0; n];
        // forward: L y = b
        x[0] = b[0] / self.diag[0];
        for i in 1..n {
            x[i] = (b[i] - self.sub[i - 1] * x[i - 1]) / self.diag[i];
        }
        // backward: L' x = y
        x[n - 1] /= self.diag[n - 1];
        for i in (0..n - 1).rev() {
            x[i] = (x[i] - self.sub[i] * x[i + 1]) / self.diag[i];
        }
        x
    }

    /// Solve `L' x = z`; if `z` is standard normal the result is N(0, Q^-1).
    pub fn solve_lt(&self, z: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(z.len(), n);
        let mut x = vec![0.0; n];
        x[n - 1] = z[n - 1] / self.diag[n - 1];
        for i in (0..n - 1).rev() {
            x[i] = (z[i] - self.sub[i] * x[i + 1]) / self.diag[i];
        }
        x
    }

    /// Full inverse `Q^-1`, assembled column by column.
    pub fn inverse(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut cols = Vec::with_capacity(n);
        for j in 0..n {
            let mut unit = vec![0.0; n];
            unit[j] = 1.0;
            cols.push(self.solve(&unit));
        }
        // transpose to rows; the inverse is symmetric up to roundoff, so
        // symmetrize while we are at it.
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                out[i][j] = 0.5 * (cols[j][i] + cols[i][j]);
            }
        }
        out
    }
}

/// Dense lower-triangular Cholesky factor of a symmetric PD matrix.
pub fn dense_cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    if a.iter().any(|row| row.len() != n) {
        return Err(Error::contract("matrix not square"));
    }
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::contract(format!(
                        "matrix not positive definite at pivot {i}"
                    )));
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Max absolute asymmetry `|a_ij - a_ji|`.
pub fn max_asymmetry(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a[i][j] - a[j][i]).abs());
        }
    }
    worst
}

/// Multiply a lower-triangular matrix by a vector.
pub fn lower_mul(l: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
    l.iter()
        .enumerate()
        .map(|(i, row)| row[..=i].iter().zip(z).map(|(a, b)| a * b).sum())
        .collect()
}
