//! Small dense linear-algebra helpers shared by the filter, the detector and
//! the decomposition.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Largest absolute entry, used as the reference norm for relative tolerances.
pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Replace `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `‖m − mᵀ‖ ≤ rel_tol·‖m‖` with the max-abs norm; zero matrices pass.
pub fn is_symmetric(m: &Matrix, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = max_abs(m);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_sym_eigenvalue(m: &Matrix) -> f64 {
    let mut s = m.clone();
    symmetrize(&mut s);
    SymmetricEigen::new(s).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// `m` is symmetric and its smallest eigenvalue is at least `−rel_tol·‖m‖`.
pub fn is_psd(m: &Matrix, rel_tol: f64) -> bool {
    m.is_square()
        && is_symmetric(m, rel_tol)
        && (m.nrows() == 0 || min_sym_eigenvalue(m) >= -rel_tol * max_abs(m))
}

/// A factor `L` with `L·Lᵀ = m` for a symmetric PSD matrix.
///
/// Lower-triangular Cholesky when `m` is positive definite, otherwise the
/// eigendecomposition square root `V·diag(√λ)`, with eigenvalues that are
/// negative only by roundoff clamped to zero.
pub fn covariance_sqrt(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::model("covariance must be square"));
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    if let Some(chol) = Cholesky::new(s.clone()) {
        return Ok(chol.l());
    }
    let scale = max_abs(&s);
    let eig = SymmetricEigen::new(s);
    let mut l = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -1e-9 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::model(format!(
                "covariance is not positive semidefinite (eigenvalue {lambda:e})"
            )));
        }
        let root = lambda.max(0.0).sqrt();
        l.column_mut(j).scale_mut(root);
    }
    Ok(l)
}

/// Cholesky factorization of a symmetric positive definite matrix with a
/// cheap conditioning estimate taken from the factor's diagonal.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    cond_estimate: f64,
}

impl SpdFactor {
    /// Condition estimates above this value are reported as singular.
    pub const MAX_CONDITION: f64 = 1e12;

    pub fn new(m: &Matrix) -> Result<Self> {
        let mut s = m.clone();
        symmetrize(&mut s);
        let chol = Cholesky::new(s)
            .ok_or_else(|| Error::numerical("matrix is not positive definite"))?;
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
        let cond_estimate = if lo > 0.0 { (hi / lo).powi(2) } else { f64::INFINITY };
        if !(cond_estimate <= Self::MAX_CONDITION) {
            return Err(Error::numerical(format!(
                "matrix is numerically singular (condition estimate {cond_estimate:e})"
            )));
        }
        Ok(SpdFactor { chol, cond_estimate })
    }

    pub fn cond_estimate(&self) -> f64 {
        self.cond_estimate
    }

    pub fn solve_vec(&self, b: &Vector) -> Vector {
        self.chol.solve(b)
    }

    pub fn solve(&self, b: &Matrix) -> Matrix {
        self.chol.solve(b)
    }

    /// `bᵀ·M⁻¹·b`.
    pub fn quad_form(&self, b: &Vector) -> f64 {
        b.dot(&self.chol.solve(b))
    }
}

/// Spectral radius from the real Schur form.
pub fn spectral_radius(a: &Matrix) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Matrix exponential (scaling and squaring with a Padé approximant).
pub fn expm(a: &Matrix) -> Matrix {
    a.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_of_singular_psd() {
        let q = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = covariance_sqrt(&q).unwrap();
        assert!((&l * l.transpose() - &q).abs().max() < 1e-12);
        assert!(covariance_sqrt(&Matrix::zeros(3, 3)).unwrap().abs().max() == 0.0);
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let q = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        assert!(matches!(covariance_sqrt(&q), Err(Error::Model(_))));
    }

    #[test]
    fn spd_factor_flags_near_singular() {
        let s = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 1e-14]));
        assert!(matches!(SpdFactor::new(&s), Err(Error::Numerical { .. })));
        let f = SpdFactor::new(&Matrix::from_diagonal(&Vector::from_vec(vec![4.0, 1.0]))).unwrap();
        assert!((f.quad_form(&Vector::from_vec(vec![2.0, 1.0])) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn expm_of_nilpotent() {
        let a = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = expm(&a);
        assert!((e - Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])).abs().max() < 1e-14);
    }
}
