//! Discrete-time Kalman filter with a full per-step trace.
//!
//! The filter is always run with the *assumed* model; it has no access to
//! the plant that produced the measurements.
//!
//! Step indexing: `(x0_mean, P0)` is the prior for the state at the first
//! measurement instant, so step 0 is a correction only and every later step
//! is a prediction followed by a correction. Row `k` of the measurement
//! matrix is consumed at step `k`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::{is_psd, is_symmetric, symmetrize, Matrix, SpdFactor, Vector};
use crate::model::SystemModel;
use crate::csvutil::{csv_err, fmt_f64, write_comment};

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x_hat: Vector,
    pub p: Matrix,
    pub k: usize,
}

/// Everything the filter computed at one step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub k: usize,
    pub x_pred: Vector,
    pub p_pred: Matrix,
    pub z_tilde: Vector,
    pub s: Matrix,
    pub gain: Matrix,
    pub x_post: Vector,
    pub p_post: Matrix,
    s_factor: SpdFactor,
}

impl StepRecord {
    /// `z̃ᵀ·S⁻¹·z̃`, reusing the factorization from the gain computation.
    pub fn chi2(&self) -> f64 {
        self.s_factor.quad_form(&self.z_tilde).max(0.0)
    }

    pub fn s_factor(&self) -> &SpdFactor {
        &self.s_factor
    }

    pub fn posterior(&self) -> FilterState {
        FilterState { x_hat: self.x_post.clone(), p: self.p_post.clone(), k: self.k }
    }
}

pub fn kf_init(x0_mean: &Vector, p0: &Matrix) -> Result<FilterState> {
    let n = x0_mean.len();
    if p0.shape() != (n, n) {
        return Err(Error::arg(format!("P0 is {:?}, expected {n}x{n}", p0.shape())));
    }
    if !is_symmetric(p0, 1e-9) {
        return Err(Error::arg("P0 is not symmetric"));
    }
    if !is_psd(p0, 1e-9) {
        return Err(Error::arg("P0 is not positive semidefinite"));
    }
    let mut p = p0.clone();
    symmetrize(&mut p);
    Ok(FilterState { x_hat: x0_mean.clone(), p, k: 0 })
}

/// `x_pred = A·x̂`, `P_pred = A·P·Aᵀ + Q`.
pub fn kf_predict(state: &FilterState, model: &SystemModel) -> Result<(Vector, Matrix)> {
    let n = model.n();
    if state.x_hat.len() != n || state.p.shape() != (n, n) {
        return Err(Error::arg("filter state does not match the model dimension"));
    }
    let a = model.a();
    let x_pred = a * &state.x_hat;
    let mut p_pred = a * &state.p * a.transpose() + model.q();
    symmetrize(&mut p_pred);
    Ok((x_pred, p_pred))
}

/// Measurement update. `S⁻¹` is never formed: the gain comes from a
/// Cholesky solve `S·Kᵀ = H·P_pred`.
pub fn kf_correct(
    k: usize,
    x_pred: &Vector,
    p_pred: &Matrix,
    z: &Vector,
    model: &SystemModel,
) -> Result<StepRecord> {
    let (n, m) = (model.n(), model.m());
    if x_pred.len() != n || p_pred.shape() != (n, n) || z.len() != m {
        return Err(Error::arg("correction inputs do not match the model dimensions"));
    }
    let h = model.h();
    let z_tilde = z - h * x_pred;
    let hp = h * p_pred;
    let mut s = &hp * h.transpose() + model.r();
    symmetrize(&mut s);
    let s_factor = SpdFactor::new(&s).map_err(|e| e.at_step(k))?;
    let gain = s_factor.solve(&hp).transpose();
    let x_post = x_pred + &gain * &z_tilde;
    let mut p_post = p_pred - &gain * &hp;
    symmetrize(&mut p_post);
    Ok(StepRecord {
        k,
        x_pred: x_pred.clone(),
        p_pred: p_pred.clone(),
        z_tilde,
        s,
        gain,
        x_post,
        p_post,
        s_factor,
    })
}

/// Filter a whole measurement stream (`steps × m`).
pub fn run_filter(
    model: &SystemModel,
    x0_mean: &Vector,
    p0: &Matrix,
    measurements: &Matrix,
) -> Result<Vec<StepRecord>> {
    if measurements.ncols() != model.m() {
        return Err(Error::arg(format!(
            "measurements have {} columns, model expects {}",
            measurements.ncols(),
            model.m()
        )));
    }
    if x0_mean.len() != model.n() {
        return Err(Error::arg("x0 does not match the model dimension"));
    }
    let mut state = kf_init(x0_mean, p0)?;
    let mut records = Vec::with_capacity(measurements.nrows());
    for k in 0..measurements.nrows() {
        let (x_pred, p_pred) = if k == 0 {
            (state.x_hat.clone(), state.p.clone())
        } else {
            kf_predict(&state, model)?
        };
        let z = measurements.row(k).transpose();
        let record = kf_correct(k, &x_pred, &p_pred, &z, model)?;
        state = record.posterior();
        records.push(record);
    }
    Ok(records)
}

/// Write `k, x_post.., z̃.., diag(S).., c` per step.
pub fn write_steps_csv<W: Write>(records: &[StepRecord], mut out: W, comment: Option<&str>) -> Result<()> {
    write_comment(&mut out, comment)?;
    let Some(first) = records.first() else {
        return Ok(());
    };
    let (n, m) = (first.x_post.len(), first.z_tilde.len());
    let mut header = vec!["k".to_string()];
    header.extend((1..=n).map(|i| format!("x_post_{i}")));
    header.extend((1..=m).map(|i| format!("z_tilde_{i}")));
    header.extend((1..=m).map(|i| format!("s_{i}")));
    header.push("c".into());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
    for rec in records {
        let mut row = vec![rec.k.to_string()];
        row.extend(rec.x_post.iter().map(|&v| fmt_f64(v)));
        row.extend(rec.z_tilde.iter().map(|&v| fmt_f64(v)));
        row.extend(rec.s.diagonal().iter().map(|&v| fmt_f64(v)));
        row.push(fmt_f64(rec.chi2()));
        w.write_record(&row).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Parsed form of a step trace written by [`write_steps_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepTable {
    pub k: Vec<usize>,
    pub x_post: Matrix,
    pub z_tilde: Matrix,
    /// Diagonal of `S` per step.
    pub s_diag: Matrix,
    pub c: Vec<f64>,
}

pub fn read_steps_csv(text: &str) -> Result<StepTable> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(csv_err)?.clone();
    let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
    let (n, m) = (count("x_post_"), count("z_tilde_"));
    let mut expected = vec!["k".to_string()];
    expected.extend((1..=n).map(|i| format!("x_post_{i}")));
    expected.extend((1..=m).map(|i| format!("z_tilde_{i}")));
    expected.extend((1..=m).map(|i| format!("s_{i}")));
    expected.push("c".into());
    if n == 0 || m == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::parse(1, "not a step trace header"));
    }
    let mut ks = Vec::new();
    let mut cells: Vec<f64> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let row = ks.len();
        ks.push(rec[0].parse().map_err(|_| Error::parse(line, format!("row {row}: invalid k")))?);
        for cell in rec.iter().skip(1) {
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::parse(line, format!("row {row}: `{}` is not a finite number", cell)))?;
            cells.push(v);
        }
    }
    let width = 2 * m + n + 1;
    let rows = ks.len();
    let at = |r: usize, c: usize| cells[r * width + c];
    Ok(StepTable {
        x_post: Matrix::from_fn(rows, n, |r, c| at(r, c)),
        z_tilde: Matrix::from_fn(rows, m, |r, c| at(r, n + c)),
        s_diag: Matrix::from_fn(rows, m, |r, c| at(r, n + m + c)),
        c: (0..rows).map(|r| at(r, width - 1)).collect(),
        k: ks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_random_stable_system, NoiseScales};
    use crate::scenario::simulate_trajectory;

    fn scalar_model(a: f64, q: f64, r: f64) -> SystemModel {
        SystemModel::new(
            Matrix::from_element(1, 1, a),
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, q),
            Matrix::from_element(1, 1, r),
        )
        .unwrap()
    }

    #[test]
    fn init_accepts_psd_boundary_and_rejects_indefinite() {
        let s = kf_init(&Vector::zeros(2), &Matrix::identity(2, 2)).unwrap();
        assert_eq!(s.p, Matrix::identity(2, 2));
        assert_eq!(s.k, 0);
        assert!(kf_init(&Vector::from_element(2, 1.0), &Matrix::zeros(2, 2)).is_ok());
        let bad = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, -1e-6]));
        assert!(matches!(kf_init(&Vector::zeros(2), &bad), Err(Error::Argument(_))));
        let asym = Matrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]);
        assert!(matches!(kf_init(&Vector::zeros(2), &asym), Err(Error::Argument(_))));
    }

    #[test]
    fn predict_identity_and_scalar() {
        let ident = SystemModel::new(
            Matrix::identity(2, 2),
            Matrix::identity(1, 2),
            Matrix::zeros(2, 2),
            Matrix::identity(1, 1),
        )
        .unwrap();
        let p = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let st = FilterState { x_hat: Vector::from_vec(vec![1.0, -2.0]), p: p.clone(), k: 0 };
        let (x, pp) = kf_predict(&st, &ident).unwrap();
        assert_eq!(x, st.x_hat);
        assert_eq!(pp, p);

        let st = FilterState { x_hat: Vector::from_element(1, 1.0), p: Matrix::from_element(1, 1, 1.0), k: 0 };
        let (_, pp) = kf_predict(&st, &scalar_model(2.0, 3.0, 1.0)).unwrap();
        assert_eq!(pp[(0, 0)], 7.0);
    }

    #[test]
    fn predict_rejects_mismatch() {
        let st = FilterState { x_hat: Vector::zeros(3), p: Matrix::identity(3, 3), k: 0 };
        assert!(matches!(kf_predict(&st, &scalar_model(1.0, 0.0, 1.0)), Err(Error::Argument(_))));
    }

    #[test]
    fn scalar_correction() {
        let model = scalar_model(1.0, 0.0, 1.0);
        let rec = kf_correct(
            0,
            &Vector::zeros(1),
            &Matrix::from_element(1, 1, 1.0),
            &Vector::from_element(1, 2.0),
            &model,
        )
        .unwrap();
        assert!((rec.s[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((rec.gain[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((rec.x_post[0] - 1.0).abs() < 1e-15);
        assert!((rec.p_post[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((rec.chi2() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_residual_keeps_prediction() {
        let model = make_random_stable_system(4, 3, 0.8, NoiseScales { q: 0.1, r: 1.0 }, 1).unwrap();
        let x_pred = Vector::from_vec(vec![0.3, -1.0, 2.0, 0.5]);
        let z = model.h() * &x_pred;
        let rec = kf_correct(3, &x_pred, &Matrix::identity(4, 4), &z, &model).unwrap();
        assert!(rec.z_tilde.amax() < 1e-12);
        assert!((&rec.x_post - &x_pred).amax() < 1e-12);
    }

    #[test]
    fn singular_innovation_covariance_carries_step() {
        // Two identical channels with tiny noise: S is rank one plus 1e-10·I.
        let model = SystemModel::new(
            Matrix::identity(1, 1),
            Matrix::from_row_slice(2, 1, &[1.0, 1.0]),
            Matrix::zeros(1, 1),
            Matrix::identity(2, 2) * 1e-10,
        )
        .unwrap();
        let err = kf_correct(
            42,
            &Vector::zeros(1),
            &Matrix::from_element(1, 1, 1e6),
            &Vector::zeros(2),
            &model,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numerical { step: Some(42), .. }), "{err:?}");
    }

    #[test]
    fn perfect_model_zero_noise_has_zero_residuals() {
        let model = make_random_stable_system(5, 3, 0.9, NoiseScales { q: 0.0, r: 1.0 }, 8).unwrap();
        let x0 = Vector::from_vec(vec![1.0, -0.5, 0.2, 0.0, 3.0]);
        let mut z = Matrix::zeros(40, 3);
        let mut x = x0.clone();
        for k in 0..40 {
            if k > 0 {
                x = model.a() * &x;
            }
            z.row_mut(k).copy_from(&(model.h() * &x).transpose());
        }
        let recs = run_filter(&model, &x0, &Matrix::zeros(5, 5), &z).unwrap();
        for r in &recs {
            assert!(r.z_tilde.amax() < 1e-10, "step {}", r.k);
        }
    }

    #[test]
    fn steps_csv_layout() {
        let model = scalar_model(0.5, 0.1, 1.0);
        let (_, z) = simulate_trajectory(&model, &Vector::zeros(1), 3, 0).unwrap();
        let recs = run_filter(&model, &Vector::zeros(1), &Matrix::identity(1, 1), &z).unwrap();
        let mut buf = Vec::new();
        write_steps_csv(&recs, &mut buf, Some("seed=0")).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# seed=0");
        assert_eq!(lines[1], "k,x_post_1,z_tilde_1,s_1,c");
        assert_eq!(lines.len(), 5);
        let table = read_steps_csv(&text).unwrap();
        assert_eq!(table.k, vec![0, 1, 2]);
        assert_eq!(table.x_post[(2, 0)], recs[2].x_post[0]);
        assert_eq!(table.c[1], recs[1].chi2());
        let truncated = text.replace("\n2,", "\n2\n#");
        assert!(matches!(read_steps_csv(&truncated), Err(Error::Parse { .. })));
        assert!(read_steps_csv("k,c\n0,1\n").is_err());
    }
}
