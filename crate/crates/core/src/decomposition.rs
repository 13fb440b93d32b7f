//! Observability (Kalman) decomposition with respect to a subset of
//! measurement channels.
//!
//! The first `n1` rows of the orthogonal transform `T` span the row space of
//! the observability matrix `[H_s; H_s·A; …; H_s·A^{n−1}]`; the remaining
//! rows span its null space. In the coordinates `X = T·x` the transition is
//! block lower-triangular, `[[A_o, 0], [A_21, A_u]]`, and the suspicious
//! measurements see only the observable block, `H_s·Tᵀ = [H_so, 0]`.

use nalgebra::SVD;

use crate::error::{Error, Result};
use crate::linalg::{max_abs, Matrix, Vector};
use crate::textfmt::{self, Document};

/// Stack `H_s·A^j` for `j = 0..n`, by repeated multiplication.
pub fn observability_matrix(a: &Matrix, h_s: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    if !a.is_square() || h_s.ncols() != n {
        return Err(Error::arg(format!(
            "A is {:?} and H_s is {:?}; need n×n and m_s×n",
            a.shape(),
            h_s.shape()
        )));
    }
    let ms = h_s.nrows();
    if ms == 0 {
        return Err(Error::arg("observability matrix needs at least one measurement row"));
    }
    let mut out = Matrix::zeros(n * ms, n);
    let mut block = h_s.clone();
    for j in 0..n {
        out.view_mut((j * ms, 0), (ms, n)).copy_from(&block);
        if j + 1 < n {
            block = &block * a;
        }
    }
    Ok(out)
}

/// Default relative singular-value tolerance for an `rows × cols` matrix.
pub fn default_rank_tol(rows: usize, cols: usize) -> f64 {
    rows.max(cols) as f64 * 1e-12
}

/// Number of singular values above `rel_tol·σ_max`; zero for a zero matrix.
pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservabilityDecomposition {
    pub t: Matrix,
    pub t_inv: Matrix,
    pub n1: usize,
    pub a_cal: Matrix,
    pub h_cal: Matrix,
    pub q_cal: Matrix,
    pub a_o: Matrix,
    pub a_21: Matrix,
    pub a_u: Matrix,
    pub h_so: Matrix,
    /// Largest absolute entry of the blocks that should vanish.
    pub structural_residual: f64,
}

impl ObservabilityDecomposition {
    /// Assemble a decomposition from a given orthogonal transform whose first
    /// `n1` rows span the observable subspace.
    pub fn from_transform(a: &Matrix, h_s: &Matrix, q: &Matrix, t: Matrix, n1: usize) -> Result<Self> {
        let n = a.nrows();
        if t.shape() != (n, n) || q.shape() != (n, n) || h_s.ncols() != n {
            return Err(Error::arg("transform, A, H_s and Q dimensions disagree"));
        }
        if n1 == 0 || n1 > n {
            return Err(Error::arg(format!("observable dimension {n1} not in 1..={n}")));
        }
        let t_inv = t.transpose();
        let ortho_err = max_abs(&(&t * &t_inv - Matrix::identity(n, n)));
        if ortho_err > 1e-9 {
            return Err(Error::numerical(format!("transform is not orthogonal (error {ortho_err:e})")));
        }
        let a_cal = &t * a * &t_inv;
        let h_cal = h_s * &t_inv;
        let q_cal = &t * q * t.transpose();
        let nu = n - n1;
        let structural_residual = if nu == 0 {
            0.0
        } else {
            max_abs(&a_cal.view((0, n1), (n1, nu)).into_owned())
                .max(max_abs(&h_cal.view((0, n1), (h_cal.nrows(), nu)).into_owned()))
        };
        if nu > 0 {
            let scale = max_abs(&a_cal).max(max_abs(&h_cal));
            if structural_residual > 1e-8 * scale {
                return Err(Error::numerical(format!(
                    "decomposition is not block triangular (residual {structural_residual:e})"
                )));
            }
        }
        Ok(ObservabilityDecomposition {
            a_o: a_cal.view((0, 0), (n1, n1)).into_owned(),
            a_21: a_cal.view((n1, 0), (nu, n1)).into_owned(),
            a_u: a_cal.view((n1, n1), (nu, nu)).into_owned(),
            h_so: h_cal.view((0, 0), (h_cal.nrows(), n1)).into_owned(),
            t,
            t_inv,
            n1,
            a_cal,
            h_cal,
            q_cal,
            structural_residual,
        })
    }

    pub fn n(&self) -> usize {
        self.t.nrows()
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.n1 < self.n()
    }

    /// Split `T·x` into its observable and unobservable parts.
    pub fn transform_estimates(&self, x: &Vector) -> Result<(Vector, Vector)> {
        if x.len() != self.n() {
            return Err(Error::arg("state length does not match the decomposition"));
        }
        let big = &self.t * x;
        let n1 = self.n1;
        Ok((big.rows(0, n1).into_owned(), big.rows(n1, self.n() - n1).into_owned()))
    }

    /// Unobservable-part discrepancy for a step, from the a-priori and
    /// a-posteriori estimates in original coordinates.
    pub fn d_for_step(&self, x_pred: &Vector, x_post: &Vector) -> Result<f64> {
        let (xo_pred, xu_pred) = self.transform_estimates(x_pred)?;
        let (_, xu_post) = self.transform_estimates(x_post)?;
        crate::diagnosis::d_metric(&xu_post, &xo_pred, &xu_pred, &self.a_21, &self.a_u)
    }
}

/// Build the decomposition of `(A, H_s)`. `Q` is carried into the new
/// coordinates as `T·Q·Tᵀ`.
pub fn build_transform(a: &Matrix, h_s: &Matrix, q: &Matrix, rel_tol: Option<f64>) -> Result<ObservabilityDecomposition> {
    let obs = observability_matrix(a, h_s)?;
    let n = a.nrows();
    let tol = rel_tol.unwrap_or_else(|| default_rank_tol(obs.nrows(), obs.ncols()));
    let svd = SVD::new(obs, false, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return Err(Error::Degenerate("suspicious measurement rows are numerically zero".into()));
    }
    // Singular values are sorted in descending order; the rows of Vᵀ above
    // the tolerance span the observable subspace, the rest its complement.
    let n1 = svd.singular_values.iter().filter(|&&s| s > tol * smax).count();
    let v_t = svd.v_t.ok_or_else(|| Error::numerical("SVD did not return right singular vectors"))?;
    debug_assert_eq!(v_t.shape(), (n, n));
    ObservabilityDecomposition::from_transform(a, h_s, q, v_t, n1)
}

/// Dump `T`, `A_cal`, `H_cal`, `Q_cal` with header `n n1 m_s`.
pub fn render_decomposition(dec: &ObservabilityDecomposition) -> String {
    let doc = Document {
        header: vec![dec.n(), dec.n1, dec.h_cal.nrows()],
        blocks: vec![dec.t.clone(), dec.a_cal.clone(), dec.h_cal.clone(), dec.q_cal.clone()],
        meta: vec![("structural_residual".into(), format!("{:e}", dec.structural_residual))],
    };
    textfmt::render(&doc)
}

/// Read a dump back. The original `A`, `H_s` and `Q` are recovered through
/// `Tᵀ` and the blocks are re-derived.
pub fn parse_decomposition(text: &str) -> Result<ObservabilityDecomposition> {
    let doc = textfmt::parse(text)?;
    let (n, n1, ms) = match doc.header.as_slice() {
        [n, n1, ms] => (*n, *n1, *ms),
        _ => return Err(Error::parse(0, "decomposition header must be `n n1 m_s`")),
    };
    if n == 0 || ms == 0 || doc.blocks.len() != 4 {
        return Err(Error::parse(0, "decomposition dump needs positive sizes and 4 blocks"));
    }
    let t = textfmt::expect_shape(&doc, 0, "T", n, n)?;
    let a_cal = textfmt::expect_shape(&doc, 1, "A_cal", n, n)?;
    let h_cal = textfmt::expect_shape(&doc, 2, "H_cal", ms, n)?;
    let q_cal = textfmt::expect_shape(&doc, 3, "Q_cal", n, n)?;
    let t_inv = t.transpose();
    let a = &t_inv * a_cal * &t;
    let h_s = h_cal * &t;
    let q = &t_inv * q_cal * &t;
    ObservabilityDecomposition::from_transform(&a, &h_s, &q, t, n1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> Matrix {
        Matrix::from_diagonal(&Vector::from_row_slice(v))
    }

    #[test]
    fn observability_examples() {
        let o = observability_matrix(&Matrix::identity(2, 2), &Matrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        assert_eq!(o, Matrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]));
        let o = observability_matrix(&diag(&[1.0, 2.0]), &Matrix::from_row_slice(1, 2, &[1.0, 1.0])).unwrap();
        assert_eq!(o, Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]));
        assert_eq!(numerical_rank(&o, default_rank_tol(2, 2)), 2);
        assert!(observability_matrix(&Matrix::identity(2, 2), &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&Matrix::identity(5, 5), 1e-12), 5);
        assert_eq!(numerical_rank(&Matrix::zeros(4, 3), 1e-12), 0);
        let u = Vector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let v = Vector::from_vec(vec![0.3, 0.7, -1.1]);
        assert_eq!(numerical_rank(&(&u * v.transpose()), default_rank_tol(4, 3)), 1);
    }

    #[test]
    fn already_canonical_pair() {
        let a = diag(&[1.0, 2.0]);
        let hs = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let dec = build_transform(&a, &hs, &Matrix::identity(2, 2), None).unwrap();
        assert_eq!(dec.n1, 1);
        assert!((dec.t.abs() - Matrix::identity(2, 2)).amax() < 1e-12);
        assert!((dec.a_o[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(dec.a_21[(0, 0)].abs() < 1e-12);
        assert!((dec.a_u[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((dec.h_so[(0, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fully_observable_pair() {
        let a = Matrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]);
        let hs = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let dec = build_transform(&a, &hs, &Matrix::identity(2, 2), None).unwrap();
        assert_eq!(dec.n1, 2);
        assert!(!dec.is_rank_deficient());
        assert_eq!(dec.a_u.shape(), (0, 0));
        assert_eq!(dec.structural_residual, 0.0);
        assert!((&dec.t * dec.t.transpose() - Matrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn zero_rows_are_degenerate() {
        let err = build_transform(&Matrix::identity(3, 3), &Matrix::zeros(1, 3), &Matrix::identity(3, 3), None);
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn estimates_partition_and_round_trip() {
        let dec = build_transform(&diag(&[1.0, 2.0]), &Matrix::from_row_slice(1, 2, &[1.0, 0.0]), &Matrix::identity(2, 2), None)
            .unwrap();
        let (xo, xu) = dec.transform_estimates(&Vector::zeros(2)).unwrap();
        assert_eq!((xo.len(), xu.len()), (1, 1));
        assert_eq!(xo[0].abs() + xu[0].abs(), 0.0);

        let ident = ObservabilityDecomposition::from_transform(
            &diag(&[1.0, 2.0]),
            &Matrix::from_row_slice(1, 2, &[1.0, 0.0]),
            &Matrix::identity(2, 2),
            Matrix::identity(2, 2),
            1,
        )
        .unwrap();
        let x = Vector::from_vec(vec![3.0, 4.0]);
        let (xo, xu) = ident.transform_estimates(&x).unwrap();
        assert_eq!((xo[0], xu[0]), (3.0, 4.0));
        let joined = Vector::from_iterator(2, xo.iter().chain(xu.iter()).copied());
        assert!((&ident.t_inv * joined - x).amax() < 1e-12);
    }

    #[test]
    fn dump_round_trip() {
        let a = Matrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, 0.2, 0.7, 0.0, 0.1, 0.3, 0.9]);
        let hs = Matrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let dec = build_transform(&a, &hs, &Matrix::identity(3, 3), None).unwrap();
        let back = parse_decomposition(&render_decomposition(&dec)).unwrap();
        assert_eq!(back.n1, dec.n1);
        assert!((back.a_cal - &dec.a_cal).amax() < 1e-12);
    }
}
