//! Small dense helpers on top of nalgebra: a Cholesky factor that reports
//! its smallest pivot, jittered factorization, and PSD repair.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factor a symmetric matrix. Only the lower triangle is read.
    pub fn new(a: &DMatrix<f64>, context: &str) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "cholesky",
                expected: n,
                got: a.ncols(),
            });
        }
        let mut l = DMatrix::<f64>::zeros(n, n);
        let mut smallest = f64::INFINITY;
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            smallest = smallest.min(diag);
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::Degenerate {
                    context: context.to_string(),
                    pivot: if diag.is_nan() { f64::NAN } else { smallest },
                });
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { l })
    }

    /// Factor, retrying once with `1e-10 · tr(A)/n · I` added on failure.
    pub fn with_jitter(a: &DMatrix<f64>, context: &str) -> Result<Self> {
        match Self::new(a, context) {
            Ok(c) => Ok(c),
            Err(first) => {
                let n = a.nrows().max(1);
                let jitter = 1e-10 * a.trace() / n as f64;
                if !(jitter > 0.0) {
                    return Err(first);
                }
                let mut b = a.clone();
                for i in 0..a.nrows() {
                    b[(i, i)] += jitter;
                }
                Self::new(&b, context)
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// `log det A`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solve `L z = b` in place.
    pub fn solve_lower_mut(&self, b: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// Solve `Lᵀ z = b` in place.
    pub fn solve_upper_mut(&self, b: &mut [f64]) {
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// `A⁻¹ b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_lower_mut(x.as_mut_slice());
        self.solve_upper_mut(x.as_mut_slice());
        x
    }

    /// `A⁻¹ B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            let s = col.as_mut_slice();
            self.solve_lower_mut(s);
            self.solve_upper_mut(s);
        }
        x
    }

    /// `xᵀ A⁻¹ x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        let mut z = [0.0f64; 16];
        if n <= 16 {
            z[..n].copy_from_slice(x);
            self.solve_lower_mut(&mut z[..n]);
            z[..n].iter().map(|v| v * v).sum()
        } else {
            let mut z = x.to_vec();
            self.solve_lower_mut(&mut z);
            z.iter().map(|v| v * v).sum()
        }
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve_matrix(&DMatrix::identity(self.dim(), self.dim()))
    }
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Symmetrize and clip eigenvalues in `[-1e-10·‖A‖, 0)` to zero. More negative
/// eigenvalues are reported as a degeneracy.
pub fn repair_psd(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let sym = symmetrize(a);
    let eig = sym.clone().symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = -1e-10 * scale;
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min >= 0.0 {
        return Ok(sym);
    }
    if min < floor {
        return Err(Error::Degenerate {
            context: format!("{context}: matrix is not positive semi-definite"),
            pivot: min,
        });
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let v = &eig.eigenvectors;
    Ok(symmetrize(&(v * DMatrix::from_diagonal(&clipped) * v.transpose())))
}

/// A square-root factor `S` with `S Sᵀ = A` for a PSD matrix: Cholesky when it
/// succeeds, otherwise `V diag(√max(λ,0))` from the eigen-decomposition.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    if let Ok(c) = Cholesky::new(a, "psd_sqrt") {
        return c.l;
    }
    let eig = symmetrize(a).symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cholesky_roundtrip_and_solve() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.6, 2.0, 3.0, 0.4, 0.6, 0.4, 2.0]);
        let c = Cholesky::new(&a, "t").unwrap();
        let l = c.factor();
        assert_relative_eq!(l * l.transpose(), a, epsilon = 1e-12);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_relative_eq!(&a * c.solve(&b), b, epsilon = 1e-12);
        assert_relative_eq!(c.log_det(), a.determinant().ln(), epsilon = 1e-12);
    }

    #[test]
    fn cholesky_reports_pivot() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match Cholesky::new(&a, "t") {
            Err(Error::Degenerate { pivot, .. }) => assert_relative_eq!(pivot, -3.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn psd_repair_clips_tiny_negatives() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 - 1e-14]);
        let r = repair_psd(&a, "t").unwrap();
        assert!(r.clone().symmetric_eigen().eigenvalues.min() >= 0.0);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(repair_psd(&bad, "t").is_err());
    }

    #[test]
    fn psd_sqrt_handles_singular() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let s = psd_sqrt(&a);
        assert_relative_eq!(&s * s.transpose(), a, epsilon = 1e-12);
    }
}
