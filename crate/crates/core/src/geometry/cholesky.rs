use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Lower-triangular factor `L` of a symmetric positive-definite matrix, `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: Array2<f64>,
}

impl CholeskyFactor {
    pub fn factor(a: ArrayView2<'_, f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: a.ncols(),
            });
        }
        let mut l = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut diag = a[[j, j]];
            for k in 0..j {
                diag -= l[[j, k]] * l[[j, k]];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: j,
                    value: diag,
                });
            }
            let ljj = diag.sqrt();
            l[[j, j]] = ljj;
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / ljj;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    /// Forward substitution: returns `y` with `L y = b`.
    pub fn solve_lower(&self, b: ArrayView1<'_, f64>) -> Vec<f64> {
        let n = self.dim();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.lower[[i, k]] * y[k];
            }
            y[i] = s / self.lower[[i, i]];
        }
        y
    }

    /// `bᵀ A⁻¹ b = ‖L⁻¹ b‖²`, without forming the inverse.
    pub fn quad_form(&self, b: ArrayView1<'_, f64>) -> f64 {
        self.solve_lower(b).iter().map(|v| v * v).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn reconstructs_input() {
        let a = array![[4.0, 2.0, 0.4], [2.0, 3.0, 0.5], [0.4, 0.5, 2.0]];
        let f = CholeskyFactor::factor(a.view()).unwrap();
        let l = f.lower();
        let back = l.dot(&l.t());
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(matches!(
            CholeskyFactor::factor(a.view()),
            Err(Error::NotPositiveDefinite { pivot: 1, .. })
        ));
        let z = Array2::<f64>::zeros((2, 2));
        assert!(CholeskyFactor::factor(z.view()).is_err());
    }

    #[test]
    fn diagonal_quad_form() {
        let a = array![[4.0, 0.0], [0.0, 1.0]];
        let f = CholeskyFactor::factor(a.view()).unwrap();
        let d: Array1<f64> = array![2.0, 0.0];
        assert!((f.quad_form(d.view()) - 1.0).abs() < 1e-15);
    }
}
