//! Decide whether a χ² alarm comes from manipulated data or from a wrong
//! model.
//!
//! When the detector fires, the channels with large normalized residuals are
//! treated as suspicious. If the state is only partially observable through
//! them, manipulated data on those channels cannot move the estimate of the
//! unobservable part, so a large one-step discrepancy `d` in that part points
//! at the model. If they observe the whole state, the decision falls back
//! on how many channels are suspicious.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csvutil::{csv_err, fmt_f64, write_comment};
use crate::decomposition::{build_transform, ObservabilityDecomposition};
use crate::detector::{DetectionResult, Detector};
use crate::error::{Error, Result};
use crate::estimator::{run_filter, StepRecord};
use crate::linalg::{Matrix, Vector};
use crate::model::SystemModel;
use crate::scenario::simulate_trajectory;

/// `‖X_u_post − A_21·X_o_pred − A_u·X_u_pred‖₂`.
pub fn d_metric(xu_post: &Vector, xo_pred: &Vector, xu_pred: &Vector, a_21: &Matrix, a_u: &Matrix) -> Result<f64> {
    let nu = xu_post.len();
    if nu == 0 {
        return Err(Error::arg("d is undefined without an unobservable partition"));
    }
    if xu_pred.len() != nu || a_u.shape() != (nu, nu) || a_21.shape() != (nu, xo_pred.len()) {
        return Err(Error::arg("d_metric operands have inconsistent dimensions"));
    }
    Ok((xu_post - a_21 * xo_pred - a_u * xu_pred).norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    NoAnomaly,
    MaliciousData,
    ModelingError,
    Undecided,
}

impl Outcome {
    pub const ALL: [Outcome; 4] =
        [Outcome::NoAnomaly, Outcome::MaliciousData, Outcome::ModelingError, Outcome::Undecided];

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::NoAnomaly => "no_anomaly",
            Outcome::MaliciousData => "malicious_data",
            Outcome::ModelingError => "modeling_error",
            Outcome::Undecided => "undecided",
        }
    }

    pub fn parse(s: &str) -> Option<Outcome> {
        Outcome::ALL.into_iter().find(|o| o.as_str() == s)
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub runs: usize,
    pub quantile: f64,
    pub seed: u64,
    pub steps: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { runs: 200, quantile: 0.99, seed: 0, steps: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThdSetting {
    Fixed(f64),
    Calibrate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosisConfig {
    pub th_d: ThdSetting,
    /// `None` resolves to `⌈m/2⌉`.
    pub n_critical: Option<usize>,
    pub calibration: CalibrationConfig,
    /// Relative singular-value tolerance for the observability rank.
    pub rank_tol: Option<f64>,
    /// Leading steps excluded from calibration pools and run summaries.
    pub burn_in: usize,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        DiagnosisConfig {
            th_d: ThdSetting::Calibrate,
            n_critical: None,
            calibration: CalibrationConfig::default(),
            rank_tol: None,
            burn_in: 20,
        }
    }
}

impl DiagnosisConfig {
    pub fn validate(&self) -> Result<()> {
        match self.th_d {
            ThdSetting::Fixed(v) if !(v > 0.0) => return Err(Error::arg("TH_d must be positive")),
            ThdSetting::Calibrate => {
                let c = &self.calibration;
                if !(c.quantile > 0.0 && c.quantile < 1.0) {
                    return Err(Error::arg(format!("calibration quantile {} not in (0, 1)", c.quantile)));
                }
                if c.runs < 30 {
                    return Err(Error::arg("calibration needs at least 30 runs"));
                }
                if c.steps <= self.burn_in {
                    return Err(Error::arg("calibration runs must be longer than the burn-in"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn resolve_n_critical(&self, m: usize) -> usize {
        self.n_critical.unwrap_or(m.div_ceil(2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdsUsed {
    pub th_chi: f64,
    pub th_r: f64,
    pub th_d: Option<f64>,
    pub n_critical: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosisVerdict {
    pub k: usize,
    pub outcome: Outcome,
    pub c: f64,
    pub suspicious: Vec<usize>,
    /// Present only on the rank-deficient branch.
    pub d: Option<f64>,
    pub n1: Option<usize>,
    pub thresholds: ThresholdsUsed,
    pub note: Option<String>,
}

/// Source of `TH_d` for a suspicious set.
pub trait DThreshold: Sync {
    fn th_d(&self, suspicious: &[usize], dec: &ObservabilityDecomposition) -> Result<f64>;
}

impl DThreshold for f64 {
    fn th_d(&self, _: &[usize], _: &ObservabilityDecomposition) -> Result<f64> {
        Ok(*self)
    }
}

/// Seed for calibration run `i`, decorrelated from the base seed.
fn run_seed(base: u64, i: usize) -> u64 {
    let mut z = base ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `d(k)` for every post-burn-in step of `runs` normal-condition simulations
/// of `model`, with the decomposition for `suspicious`. Samples are ordered
/// by run, then step.
pub fn calibration_samples(
    model: &SystemModel,
    suspicious: &[usize],
    x0: &Vector,
    p0: &Matrix,
    calib: &CalibrationConfig,
    burn_in: usize,
    rank_tol: Option<f64>,
) -> Result<Vec<f64>> {
    let dec = decompose(model, suspicious, rank_tol)?;
    if !dec.is_rank_deficient() {
        return Err(Error::arg(format!(
            "channels {suspicious:?} observe the full state; TH_d cannot be calibrated"
        )));
    }
    let per_run = (0..calib.runs)
        .into_par_iter()
        .map(|i| {
            let (_, z) = simulate_trajectory(model, x0, calib.steps, run_seed(calib.seed, i))?;
            let recs = run_filter(model, x0, p0, &z)?;
            recs.iter()
                .filter(|r| r.k >= burn_in.max(1))
                .map(|r| dec.d_for_step(&r.x_pred, &r.x_post))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(per_run.into_iter().flatten().collect())
}

/// Nearest-rank empirical quantile.
pub fn empirical_quantile(samples: &[f64], q: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::arg("no samples for quantile"));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::arg(format!("quantile {q} not in (0, 1)")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// Empirical quantile of `d` under normal operation of the assumed model.
pub fn calibrate_th_d(
    model: &SystemModel,
    suspicious: &[usize],
    x0: &Vector,
    p0: &Matrix,
    cfg: &DiagnosisConfig,
) -> Result<f64> {
    let samples =
        calibration_samples(model, suspicious, x0, p0, &cfg.calibration, cfg.burn_in, cfg.rank_tol)?;
    empirical_quantile(&samples, cfg.calibration.quantile)
}

/// Calibrates `TH_d` lazily, once per suspicious set, and shares the result
/// between threads.
pub struct CalibratedThreshold {
    model: SystemModel,
    x0: Vector,
    p0: Matrix,
    cfg: DiagnosisConfig,
    cache: Mutex<HashMap<Vec<usize>, Arc<OnceLock<Result<f64>>>>>,
}

impl CalibratedThreshold {
    pub fn new(model: SystemModel, x0: Vector, p0: Matrix, cfg: DiagnosisConfig) -> Self {
        CalibratedThreshold { model, x0, p0, cfg, cache: Mutex::new(HashMap::new()) }
    }

    /// Calibrated values so far, sorted by suspicious set.
    pub fn calibrated(&self) -> Vec<(Vec<usize>, f64)> {
        let cache = self.cache.lock().expect("calibration cache poisoned");
        let mut out: Vec<(Vec<usize>, f64)> = cache
            .iter()
            .filter_map(|(k, cell)| cell.get().and_then(|r| r.as_ref().ok()).map(|&v| (k.clone(), v)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

impl DThreshold for CalibratedThreshold {
    fn th_d(&self, suspicious: &[usize], _: &ObservabilityDecomposition) -> Result<f64> {
        let key = sorted_set(suspicious);
        let cell = {
            let mut cache = self.cache.lock().expect("calibration cache poisoned");
            cache.entry(key.clone()).or_default().clone()
        };
        cell.get_or_init(|| calibrate_th_d(&self.model, &key, &self.x0, &self.p0, &self.cfg))
            .clone()
    }
}

fn sorted_set(indices: &[usize]) -> Vec<usize> {
    let mut key = indices.to_vec();
    key.sort_unstable();
    key.dedup();
    key
}

/// Decomposition of the assumed model with respect to a channel subset.
pub fn decompose(model: &SystemModel, suspicious: &[usize], rank_tol: Option<f64>) -> Result<ObservabilityDecomposition> {
    let key = sorted_set(suspicious);
    let h_s = model.h_rows(&key)?;
    build_transform(model.a(), &h_s, model.q(), rank_tol)
}

fn verdict_core(
    step: &StepRecord,
    detection: &DetectionResult,
    model: &SystemModel,
    cfg: &DiagnosisConfig,
    th_r: f64,
    th: &dyn DThreshold,
    dec_for: &mut dyn FnMut(&[usize]) -> Result<Arc<ObservabilityDecomposition>>,
) -> Result<DiagnosisVerdict> {
    if step.k != detection.k {
        return Err(Error::arg("detection and step refer to different time steps"));
    }
    let n_critical = cfg.resolve_n_critical(model.m());
    let mut verdict = DiagnosisVerdict {
        k: step.k,
        outcome: Outcome::NoAnomaly,
        c: detection.c,
        suspicious: detection.suspicious.clone(),
        d: None,
        n1: None,
        thresholds: ThresholdsUsed { th_chi: detection.th_chi, th_r, th_d: None, n_critical },
        note: None,
    };
    if !detection.triggered {
        return Ok(verdict);
    }
    if detection.suspicious.is_empty() {
        verdict.outcome = Outcome::Undecided;
        verdict.note = Some("aggregate statistic triggered but no channel exceeded TH_r".into());
        return Ok(verdict);
    }
    let key = sorted_set(&detection.suspicious);
    let dec = match dec_for(&key) {
        Ok(dec) => dec,
        Err(Error::Degenerate(msg)) => {
            verdict.outcome = Outcome::Undecided;
            verdict.note = Some(msg);
            return Ok(verdict);
        }
        Err(e) => return Err(e.at_step(step.k)),
    };
    verdict.n1 = Some(dec.n1);
    if dec.is_rank_deficient() {
        let d = dec.d_for_step(&step.x_pred, &step.x_post)?;
        let th_d = th.th_d(&key, &dec)?;
        verdict.d = Some(d);
        verdict.thresholds.th_d = Some(th_d);
        verdict.outcome = if d > th_d { Outcome::ModelingError } else { Outcome::MaliciousData };
    } else {
        verdict.outcome =
            if key.len() > n_critical { Outcome::ModelingError } else { Outcome::Undecided };
    }
    Ok(verdict)
}

/// Diagnose one step with a freshly built decomposition.
pub fn diagnose(
    step: &StepRecord,
    detection: &DetectionResult,
    model: &SystemModel,
    detector: &Detector,
    cfg: &DiagnosisConfig,
    th: &dyn DThreshold,
) -> Result<DiagnosisVerdict> {
    let rank_tol = cfg.rank_tol;
    verdict_core(step, detection, model, cfg, detector.config().th_r, th, &mut |key| {
        decompose(model, key, rank_tol).map(Arc::new)
    })
}

/// Step-by-step diagnosis that keeps decompositions per suspicious set.
pub struct Diagnoser<'a> {
    model: &'a SystemModel,
    detector: Detector,
    cfg: DiagnosisConfig,
    th: &'a dyn DThreshold,
    cache: HashMap<Vec<usize>, Arc<ObservabilityDecomposition>>,
}

impl<'a> Diagnoser<'a> {
    pub fn new(model: &'a SystemModel, detector: Detector, cfg: DiagnosisConfig, th: &'a dyn DThreshold) -> Self {
        Diagnoser { model, detector, cfg, th, cache: HashMap::new() }
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn step(&mut self, step: &StepRecord) -> Result<(DetectionResult, DiagnosisVerdict)> {
        let detection = self.detector.detect(step)?;
        let model = self.model;
        let rank_tol = self.cfg.rank_tol;
        let cache = &mut self.cache;
        let verdict = verdict_core(step, &detection, model, &self.cfg, self.detector.config().th_r, self.th, &mut |key| {
            if let Some(dec) = cache.get(key) {
                return Ok(dec.clone());
            }
            let dec = Arc::new(decompose(model, key, rank_tol)?);
            cache.insert(key.to_vec(), dec.clone());
            Ok(dec)
        })?;
        Ok((detection, verdict))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub no_anomaly: usize,
    pub malicious_data: usize,
    pub modeling_error: usize,
    pub undecided: usize,
}

impl OutcomeCounts {
    pub fn add(&mut self, o: Outcome) {
        *self.slot(o) += 1;
    }

    fn slot(&mut self, o: Outcome) -> &mut usize {
        match o {
            Outcome::NoAnomaly => &mut self.no_anomaly,
            Outcome::MaliciousData => &mut self.malicious_data,
            Outcome::ModelingError => &mut self.modeling_error,
            Outcome::Undecided => &mut self.undecided,
        }
    }

    pub fn get(&self, o: Outcome) -> usize {
        [self.no_anomaly, self.malicious_data, self.modeling_error, self.undecided][o.index()]
    }

    pub fn total(&self) -> usize {
        Outcome::ALL.iter().map(|&o| self.get(o)).sum()
    }

    /// Most frequent outcome; ties go to the earlier entry of [`Outcome::ALL`].
    pub fn majority(&self) -> Outcome {
        let mut best = Outcome::NoAnomaly;
        for o in Outcome::ALL {
            if self.get(o) > self.get(best) {
                best = o;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Inclusive step range the majority verdict is taken over.
    pub window: (usize, usize),
    pub pre_window: OutcomeCounts,
    pub in_window: OutcomeCounts,
    pub majority: Outcome,
}

#[derive(Debug)]
pub struct RunDiagnosis {
    pub records: Vec<StepRecord>,
    pub detections: Vec<DetectionResult>,
    pub verdicts: Vec<DiagnosisVerdict>,
    pub summary: RunSummary,
}

/// Filter, detect and diagnose a delivered measurement stream, then
/// summarize outcomes before and inside `window` (inclusive). Steps before
/// the burn-in are left out of both counts.
#[allow(clippy::too_many_arguments)]
pub fn diagnose_run(
    measurements: &Matrix,
    model: &SystemModel,
    x0: &Vector,
    p0: &Matrix,
    detector: Detector,
    cfg: &DiagnosisConfig,
    th: &dyn DThreshold,
    window: (usize, usize),
) -> Result<RunDiagnosis> {
    let records = run_filter(model, x0, p0, measurements)?;
    let mut diag = Diagnoser::new(model, detector, cfg.clone(), th);
    let mut detections = Vec::with_capacity(records.len());
    let mut verdicts = Vec::with_capacity(records.len());
    for rec in &records {
        let (det, ver) = diag.step(rec)?;
        detections.push(det);
        verdicts.push(ver);
    }
    let summary = summarize(&verdicts, window, cfg.burn_in);
    Ok(RunDiagnosis { records, detections, verdicts, summary })
}

pub fn summarize(verdicts: &[DiagnosisVerdict], window: (usize, usize), burn_in: usize) -> RunSummary {
    let mut pre = OutcomeCounts::default();
    let mut inside = OutcomeCounts::default();
    for v in verdicts.iter().filter(|v| v.k >= burn_in) {
        if v.k < window.0 {
            pre.add(v.outcome);
        } else if v.k <= window.1 {
            inside.add(v.outcome);
        }
    }
    RunSummary { window, pre_window: pre, in_window: inside, majority: inside.majority() }
}

fn bitmask(suspicious: &[usize], m: usize) -> String {
    let mut bits = vec![b'0'; m];
    for &i in suspicious {
        if i < m {
            bits[i] = b'1';
        }
    }
    String::from_utf8(bits).expect("ascii")
}

/// Verdict timeline: `k, c, TH_chi, suspicious_bitmask, n1, d, TH_d, outcome`.
/// The bitmask has one character per channel, channel 1 first. Absent
/// values are empty cells.
pub fn write_verdicts_csv<W: Write>(verdicts: &[DiagnosisVerdict], m: usize, mut out: W, comment: Option<&str>) -> Result<()> {
    write_comment(&mut out, comment)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "c", "TH_chi", "suspicious_bitmask", "n1", "d", "TH_d", "outcome"])
        .map_err(csv_err)?;
    for v in verdicts {
        w.write_record([
            v.k.to_string(),
            fmt_f64(v.c),
            fmt_f64(v.thresholds.th_chi),
            bitmask(&v.suspicious, m),
            v.n1.map(|x| x.to_string()).unwrap_or_default(),
            v.d.map(fmt_f64).unwrap_or_default(),
            v.thresholds.th_d.map(fmt_f64).unwrap_or_default(),
            v.outcome.as_str().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// One parsed row of a verdict timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct VerdictRow {
    pub k: usize,
    pub c: f64,
    pub th_chi: f64,
    pub suspicious: Vec<usize>,
    pub n1: Option<usize>,
    pub d: Option<f64>,
    pub th_d: Option<f64>,
    pub outcome: Outcome,
}

pub fn read_verdicts_csv(text: &str) -> Result<Vec<VerdictRow>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != ["k", "c", "TH_chi", "suspicious_bitmask", "n1", "d", "TH_d", "outcome"] {
        return Err(Error::parse(1, "not a verdict timeline header"));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |what: &str| Error::parse(line, format!("invalid {what}"));
        let num = |i: usize, what: &str| -> Result<f64> {
            rec[i].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(what))
        };
        let opt_num = |i: usize, what: &str| -> Result<Option<f64>> {
            if rec[i].is_empty() { Ok(None) } else { num(i, what).map(Some) }
        };
        let suspicious = rec[3]
            .bytes()
            .enumerate()
            .map(|(i, b)| match b {
                b'1' => Ok(Some(i)),
                b'0' => Ok(None),
                _ => Err(bad("suspicious_bitmask")),
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        out.push(VerdictRow {
            k: rec[0].parse().map_err(|_| bad("k"))?,
            c: num(1, "c")?,
            th_chi: num(2, "TH_chi")?,
            suspicious,
            n1: if rec[4].is_empty() { None } else { Some(rec[4].parse().map_err(|_| bad("n1"))?) },
            d: opt_num(5, "d")?,
            th_d: opt_num(6, "TH_d")?,
            outcome: Outcome::parse(&rec[7]).ok_or_else(|| bad("outcome"))?,
        });
    }
    Ok(out)
}
