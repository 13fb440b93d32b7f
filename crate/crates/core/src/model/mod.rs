//! Discrete-time LTI system models `x(k+1) = A·x(k) + w(k)`, `z(k) = H·x(k) + v(k)`.

mod grid;
mod text;

pub use grid::{
    apply_topology_error, continuous_jacobian, make_swing_grid_model, BusId, Generator, GridModelSpec, GridTopology,
    Line, MeasurementPoint, Quantity, SwingNoise,
};
pub use text::{parse_model, render_model};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_psd, is_symmetric, max_abs, spectral_radius, Matrix};

/// Relative symmetry tolerance for covariance inputs.
const SYMMETRY_TOL: f64 = 1e-12;

/// The quadruple `(A, H, Q, R)` plus channel names.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    a: Matrix,
    h: Matrix,
    q: Matrix,
    r: Matrix,
    state_labels: Vec<String>,
    meas_labels: Vec<String>,
}

impl SystemModel {
    /// Validate and assemble a model with default labels `x1..xn`, `z1..zm`.
    pub fn new(a: Matrix, h: Matrix, q: Matrix, r: Matrix) -> Result<Self> {
        let n = a.nrows();
        let m = h.nrows();
        let state_labels = (1..=n).map(|i| format!("x{i}")).collect();
        let meas_labels = (1..=m).map(|i| format!("z{i}")).collect();
        Self::with_labels(a, h, q, r, state_labels, meas_labels)
    }

    pub fn with_labels(
        a: Matrix,
        h: Matrix,
        q: Matrix,
        r: Matrix,
        state_labels: Vec<String>,
        meas_labels: Vec<String>,
    ) -> Result<Self> {
        let n = a.nrows();
        let m = h.nrows();
        if n == 0 || m == 0 {
            return Err(Error::model("model needs at least one state and one measurement"));
        }
        if a.ncols() != n {
            return Err(Error::model(format!("A is {}x{}, expected square", n, a.ncols())));
        }
        if h.ncols() != n {
            return Err(Error::model(format!("H has {} columns, expected {n}", h.ncols())));
        }
        if q.shape() != (n, n) {
            return Err(Error::model(format!("Q is {:?}, expected {n}x{n}", q.shape())));
        }
        if r.shape() != (m, m) {
            return Err(Error::model(format!("R is {:?}, expected {m}x{m}", r.shape())));
        }
        if state_labels.len() != n || meas_labels.len() != m {
            return Err(Error::model("label count does not match model dimensions"));
        }
        if a.iter().chain(h.iter()).chain(q.iter()).chain(r.iter()).any(|v| !v.is_finite()) {
            return Err(Error::model("model contains non-finite entries"));
        }
        if !is_symmetric(&q, SYMMETRY_TOL) || !is_psd(&q, 1e-9) {
            return Err(Error::model("Q must be symmetric positive semidefinite"));
        }
        if !is_symmetric(&r, SYMMETRY_TOL) || r.diagonal().iter().any(|&d| d <= 0.0) {
            return Err(Error::model("R must be symmetric with a positive diagonal"));
        }
        if nalgebra::Cholesky::new(r.clone()).is_none() {
            return Err(Error::model("R must be positive definite"));
        }
        Ok(SystemModel { a, h, q, r, state_labels, meas_labels })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.h.nrows()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn h(&self) -> &Matrix {
        &self.h
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn r(&self) -> &Matrix {
        &self.r
    }

    pub fn state_labels(&self) -> &[String] {
        &self.state_labels
    }

    pub fn meas_labels(&self) -> &[String] {
        &self.meas_labels
    }

    /// Rows of `H` for the given measurement indices, in the given order.
    pub fn h_rows(&self, indices: &[usize]) -> Result<Matrix> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.m()) {
            return Err(Error::arg(format!("measurement index {bad} out of range 0..{}", self.m())));
        }
        Ok(self.h.select_rows(indices))
    }

    /// Same model with a different transition and measurement map, keeping
    /// noise covariances and labels.
    pub fn with_dynamics(&self, a: Matrix, h: Matrix) -> Result<Self> {
        Self::with_labels(
            a,
            h,
            self.q.clone(),
            self.r.clone(),
            self.state_labels.clone(),
            self.meas_labels.clone(),
        )
    }

    /// Largest absolute entrywise difference of all four matrices.
    pub fn max_abs_diff(&self, other: &SystemModel) -> f64 {
        if self.a.shape() != other.a.shape() || self.h.shape() != other.h.shape() {
            return f64::INFINITY;
        }
        [
            max_abs(&(&self.a - &other.a)),
            max_abs(&(&self.h - &other.h)),
            max_abs(&(&self.q - &other.q)),
            max_abs(&(&self.r - &other.r)),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Isotropic noise levels: `Q = q·I`, `R = r·I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseScales {
    pub q: f64,
    pub r: f64,
}

/// A random system whose transition matrix is rescaled to the requested
/// spectral radius. Entries of `A` and `H` are standard normal draws.
pub fn make_random_stable_system(
    n: usize,
    m: usize,
    target_radius: f64,
    noise: NoiseScales,
    seed: u64,
) -> Result<SystemModel> {
    if n == 0 || m == 0 {
        return Err(Error::arg("n and m must be at least 1"));
    }
    if !(target_radius > 0.0 && target_radius < 1.0) {
        return Err(Error::arg(format!("spectral radius {target_radius} not in (0, 1)")));
    }
    if !(noise.q >= 0.0) || !(noise.r > 0.0) {
        return Err(Error::arg("noise scales need q >= 0 and r > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut a = Matrix::from_fn(n, n, |_, _| draw());
    let h = Matrix::from_fn(m, n, |_, _| draw());
    let mut radius = spectral_radius(&a);
    while radius == 0.0 {
        a = Matrix::from_fn(n, n, |_, _| draw());
        radius = spectral_radius(&a);
    }
    a *= target_radius / radius;
    SystemModel::new(a, h, Matrix::identity(n, n) * noise.q, Matrix::identity(m, m) * noise.r)
}
