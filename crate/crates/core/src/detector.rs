//! χ² bad-data detection on the filter innovations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::StepRecord;
use crate::linalg::{Matrix, SpdFactor, Vector};

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 1000;

/// Lanczos approximation (g = 7, 9 terms) of `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`: power series below `a + 1`,
/// Lentz continued fraction for the complement above.
pub fn regularized_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
        }
        (sum * log_prefix.exp()).min(1.0)
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < EPS {
                break;
            }
        }
        (1.0 - log_prefix.exp() * h).max(0.0)
    }
}

/// χ² cumulative distribution `F(x | dof) = P(dof/2, x/2)`.
pub fn chi2_cdf(x: f64, dof: usize) -> Result<f64> {
    if dof == 0 {
        return Err(Error::arg("degrees of freedom must be at least 1"));
    }
    if !(x >= 0.0) {
        return Err(Error::arg(format!("chi-squared argument {x} is negative")));
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    Ok(regularized_gamma_p(dof as f64 / 2.0, x / 2.0))
}

fn chi2_pdf(x: f64, dof: usize) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let a = dof as f64 / 2.0;
    ((a - 1.0) * (x / 2.0).ln() - x / 2.0 - ln_gamma(a)).exp() / 2.0
}

/// The `x` with `chi2_cdf(x, dof) = p`: bracket, then Newton steps that fall
/// back to bisection whenever they leave the bracket.
pub fn chi2_threshold(p: f64, dof: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::arg(format!("confidence {p} not in (0, 1)")));
    }
    if dof == 0 {
        return Err(Error::arg("degrees of freedom must be at least 1"));
    }
    let cdf = |x: f64| regularized_gamma_p(dof as f64 / 2.0, x / 2.0);
    let mut lo = 0.0;
    let mut hi = dof as f64 + 1.0;
    while cdf(hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = cdf(x) - p;
        if f == 0.0 {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let slope = chi2_pdf(x, dof);
        let newton = x - f / slope;
        x = if slope > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
    }
    Ok(x)
}

/// `z̃ᵀ·S⁻¹·z̃` through a Cholesky solve.
pub fn chi2_statistic(z_tilde: &Vector, s: &Matrix) -> Result<f64> {
    if s.shape() != (z_tilde.len(), z_tilde.len()) {
        return Err(Error::arg("S does not match the residual length"));
    }
    Ok(SpdFactor::new(s)?.quad_form(z_tilde).max(0.0))
}

/// `rᵢ = |z̃ᵢ| / √Sᵢᵢ`, in standard-deviation units.
pub fn normalized_residuals(z_tilde: &Vector, s: &Matrix) -> Result<Vector> {
    if s.shape() != (z_tilde.len(), z_tilde.len()) {
        return Err(Error::arg("S does not match the residual length"));
    }
    let mut r = Vector::zeros(z_tilde.len());
    for i in 0..z_tilde.len() {
        let var = s[(i, i)];
        if !(var > 0.0) {
            return Err(Error::numerical(format!("innovation variance of channel {i} is not positive")));
        }
        r[i] = z_tilde[i].abs() / var.sqrt();
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DofPolicy {
    AllMeasurements,
    Explicit(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Chi2Config {
    pub confidence: f64,
    pub dof: DofPolicy,
    /// Per-channel threshold on normalized residuals.
    pub th_r: f64,
}

impl Default for Chi2Config {
    fn default() -> Self {
        Chi2Config { confidence: 0.99, dof: DofPolicy::AllMeasurements, th_r: 3.0 }
    }
}

impl Chi2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::arg(format!("confidence {} not in (0, 1)", self.confidence)));
        }
        if !(self.th_r > 0.0) {
            return Err(Error::arg("TH_r must be positive"));
        }
        if self.dof == DofPolicy::Explicit(0) {
            return Err(Error::arg("explicit degrees of freedom must be at least 1"));
        }
        Ok(())
    }

    pub fn resolve_dof(&self, m: usize) -> usize {
        match self.dof {
            DofPolicy::AllMeasurements => m,
            DofPolicy::Explicit(d) => d,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub k: usize,
    pub c: f64,
    pub th_chi: f64,
    pub triggered: bool,
    pub r: Vector,
    /// Channels with `rᵢ > TH_r`, largest residual first.
    pub suspicious: Vec<usize>,
}

/// Detector with its χ² threshold resolved for a fixed channel count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detector {
    cfg: Chi2Config,
    m: usize,
    th_chi: f64,
}

impl Detector {
    pub fn new(cfg: Chi2Config, m: usize) -> Result<Self> {
        cfg.validate()?;
        let th_chi = chi2_threshold(cfg.confidence, cfg.resolve_dof(m))?;
        Ok(Detector { cfg, m, th_chi })
    }

    pub fn th_chi(&self) -> f64 {
        self.th_chi
    }

    pub fn config(&self) -> &Chi2Config {
        &self.cfg
    }

    pub fn detect(&self, step: &StepRecord) -> Result<DetectionResult> {
        if step.z_tilde.len() != self.m {
            return Err(Error::arg("step does not match the detector's channel count"));
        }
        let c = step.chi2();
        let r = normalized_residuals(&step.z_tilde, &step.s).map_err(|e| e.at_step(step.k))?;
        let mut suspicious: Vec<usize> = (0..r.len()).filter(|&i| r[i] > self.cfg.th_r).collect();
        suspicious.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
        Ok(DetectionResult { k: step.k, c, th_chi: self.th_chi, triggered: c > self.th_chi, r, suspicious })
    }
}

/// One-shot detection; resolves the threshold on every call.
pub fn detect(step: &StepRecord, cfg: &Chi2Config) -> Result<DetectionResult> {
    Detector::new(*cfg, step.z_tilde.len())?.detect(step)
}
