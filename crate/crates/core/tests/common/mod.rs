#![allow(dead_code)]

//! Independent reference computations for the integration tests.

use kfdiag::linalg::{Matrix, Vector};
use kfdiag::model::SystemModel;
use nalgebra::{Complex, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gauss_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(r, c, |_, _| gauss(rng))
}

pub fn gauss_vector(n: usize, rng: &mut ChaCha8Rng) -> Vector {
    Vector::from_fn(n, |_, _| gauss(rng))
}

/// `B·Bᵀ + eps·I` for a Gaussian `B`.
pub fn random_spd(n: usize, eps: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let b = gauss_matrix(n, n, rng);
    naive_mul(&b, &b.transpose()) + Matrix::identity(n, n) * eps
}

/// Orthogonal matrix by Gram-Schmidt on Gaussian columns.
pub fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    loop {
        let g = gauss_matrix(n, n, rng);
        if let Some(q) = gram_schmidt_rows(&g.transpose(), 1e-8) {
            if q.nrows() == n {
                return q;
            }
        }
    }
}

/// Orthonormal basis of the row space, processing rows in the given order;
/// rows whose residual falls below `tol` times their norm are skipped.
pub fn gram_schmidt_rows(m: &Matrix, tol: f64) -> Option<Matrix> {
    let mut basis: Vec<Vector> = Vec::new();
    for i in 0..m.nrows() {
        let row: Vector = m.row(i).transpose();
        let norm0 = row.norm();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = row.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v -= b * c;
            }
        }
        if v.norm() > tol * norm0 {
            basis.push(v.normalize());
        }
    }
    if basis.is_empty() {
        return None;
    }
    let n = m.ncols();
    Some(Matrix::from_fn(basis.len(), n, |r, c| basis[r][c]))
}

pub fn naive_mul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.ncols(), b.nrows());
    let mut out = Matrix::zeros(a.nrows(), b.ncols());
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[(i, k)] * b[(k, j)];
            }
            out[(i, j)] = s;
        }
    }
    out
}

/// Truncated Taylor series `Σ_{j<terms} Aʲ/j!`.
pub fn taylor_expm(a: &Matrix, terms: usize) -> Matrix {
    let n = a.nrows();
    let mut sum = Matrix::identity(n, n);
    let mut term = Matrix::identity(n, n);
    for j in 1..terms {
        term = naive_mul(&term, a) / j as f64;
        sum += &term;
    }
    sum
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    max_abs(&(a - b))
}

/// The filtered mean `x̂(k|k)` as the last block of the joint MAP estimate of
/// `x(0..=k)` given `z(0..=k)`, from the normal equations of the full-horizon
/// least-squares problem.
pub fn batch_map_filtered(model: &SystemModel, x0: &Vector, p0: &Matrix, z: &Matrix, k: usize) -> Vector {
    let n = model.n();
    let dim = (k + 1) * n;
    let p0_inv = p0.clone().try_inverse().expect("P0 invertible");
    let q_inv = model.q().clone().try_inverse().expect("Q invertible");
    let r_inv = model.r().clone().try_inverse().expect("R invertible");
    let a = model.a();
    let h = model.h();
    let mut lam = Matrix::zeros(dim, dim);
    let mut eta = Vector::zeros(dim);

    let add_block = |lam: &mut Matrix, i: usize, j: usize, b: &Matrix| {
        let mut v = lam.view_mut((i * n, j * n), (n, n));
        v += b;
    };
    add_block(&mut lam, 0, 0, &p0_inv);
    let add_vec = |eta: &mut Vector, j: usize, v: &Vector| {
        for i in 0..n {
            eta[j * n + i] += v[i];
        }
    };
    add_vec(&mut eta, 0, &(&p0_inv * x0));

    let ht_rinv = h.transpose() * &r_inv;
    let ht_rinv_h = &ht_rinv * h;
    for j in 0..=k {
        add_block(&mut lam, j, j, &ht_rinv_h);
        let zj: Vector = z.row(j).transpose();
        add_vec(&mut eta, j, &(&ht_rinv * zj));
    }
    let at_qinv = a.transpose() * &q_inv;
    let at_qinv_a = &at_qinv * a;
    for j in 1..=k {
        add_block(&mut lam, j, j, &q_inv);
        add_block(&mut lam, j - 1, j - 1, &at_qinv_a);
        add_block(&mut lam, j - 1, j, &(-&at_qinv));
        add_block(&mut lam, j, j - 1, &(-(&q_inv * a)));
    }
    let sol = lam.cholesky().expect("information matrix SPD").solve(&eta);
    sol.rows(k * n, n).into_owned()
}

/// Fixed point of the prediction covariance recursion, iterated with an
/// explicit inverse of the innovation covariance.
pub fn riccati_fixed_point(model: &SystemModel, iterations: usize) -> (Matrix, Matrix) {
    let (a, h, q, r) = (model.a(), model.h(), model.q(), model.r());
    let mut p = q.clone() + Matrix::identity(model.n(), model.n());
    let mut post = p.clone();
    for _ in 0..iterations {
        let s = h * &p * h.transpose() + r;
        let s_inv = s.try_inverse().expect("S invertible");
        post = &p - &p * h.transpose() * s_inv * h * &p;
        p = a * &post * a.transpose() + q;
    }
    (p, post)
}

/// `Γ(k/2)` from `Γ(1) = 1`, `Γ(1/2) = √π` and `Γ(x+1) = x·Γ(x)`.
pub fn gamma_half_integer(k: usize) -> f64 {
    let (mut g, mut x) = if k % 2 == 0 { (1.0, 1.0) } else { (std::f64::consts::PI.sqrt(), 0.5) };
    while x < k as f64 / 2.0 {
        g *= x;
        x += 1.0;
    }
    g
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        return left + right + (left + right - whole) / 15.0;
    }
    adaptive_simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + adaptive_simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    adaptive_simpson(&f, a, b, fa, fm, fb, whole, tol, 50)
}

/// χ² CDF by integrating the density after the substitution `t = u²`,
/// which removes the singularity at the origin for one degree of freedom.
pub fn chi2_cdf_integrated(x: f64, dof: usize) -> f64 {
    let k = dof as f64;
    let norm = 2.0 / (2f64.powf(k / 2.0) * gamma_half_integer(dof));
    integrate(|u: f64| norm * u.powf(k - 1.0) * (-u * u / 2.0).exp(), 0.0, x.sqrt(), 1e-14)
}

/// Root of `chi2_cdf_integrated(x, dof) = p` by bisection.
pub fn chi2_quantile_bisection(p: f64, dof: usize) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    while chi2_cdf_integrated(hi, dof) < p {
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf_integrated(mid, dof) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Rank of `[H_s; H_s·A; …; H_s·A^{n-1}]` with every power formed from
/// scratch, counting singular values above `rel_tol·σ_max`.
pub fn brute_force_observable_rank(a: &Matrix, h_s: &Matrix, rel_tol: f64) -> usize {
    let n = a.nrows();
    let ms = h_s.nrows();
    let mut obs = Matrix::zeros(n * ms, n);
    for j in 0..n {
        let mut power = Matrix::identity(n, n);
        for _ in 0..j {
            power = naive_mul(&power, a);
        }
        obs.view_mut((j * ms, 0), (ms, n)).copy_from(&naive_mul(h_s, &power));
    }
    let sv = SVD::new(obs, false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

pub fn eigenvalues(a: &Matrix) -> Vec<Complex<f64>> {
    a.clone().complex_eigenvalues().iter().cloned().collect()
}

/// Largest distance in a greedy nearest-neighbour matching of two
/// eigenvalue multisets.
pub fn eigen_multiset_distance(a: &[Complex<f64>], b: &[Complex<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut used = vec![false; b.len()];
    let mut worst = 0.0_f64;
    for x in a {
        let (j, d) = b
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, y)| (j, (x - y).norm()))
            .min_by(|p, q| p.1.total_cmp(&q.1))
            .unwrap();
        used[j] = true;
        worst = worst.max(d);
    }
    worst
}

/// Random `(A, H_s)` with an unobservable subspace of dimension `n - n1`,
/// built block-triangular and rotated by a random orthogonal matrix.
pub fn rank_deficient_pair(n: usize, n1: usize, ms: usize, rng: &mut ChaCha8Rng) -> (Matrix, Matrix) {
    let mut a_cal = gauss_matrix(n, n, rng) * (0.9 / (n as f64).sqrt());
    for i in 0..n1 {
        for j in n1..n {
            a_cal[(i, j)] = 0.0;
        }
    }
    let mut h_cal = gauss_matrix(ms, n, rng);
    for i in 0..ms {
        for j in n1..n {
            h_cal[(i, j)] = 0.0;
        }
    }
    let t = random_orthogonal(n, rng);
    (t.transpose() * a_cal * &t, h_cal * t)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn workspace_root() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}
