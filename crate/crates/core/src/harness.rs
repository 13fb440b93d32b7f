//! Configuration-driven experiments: build models, simulate scenarios, run
//! the filter, detector and diagnosis per seed, and persist the results.
//!
//! A configuration is a TOML document with the sections `model`,
//! `scenario`, `detector`, `diagnosis`, `output` and `batch`. Unknown keys
//! are rejected. Channel numbers in configuration files and CSV headers are
//! 1-based; the library API uses 0-based indices.
//!
//! Artifact layout under the output directory:
//!
//! ```text
//! report.json                      deterministic summary
//! runtime.json                     wall-clock metadata
//! assumed_model.txt                model used by the filter
//! <kind>/seed_<i>/scenario.csv     simulated and delivered measurements
//! <kind>/seed_<i>/steps.csv        filter trace
//! <kind>/seed_<i>/verdicts.csv     verdict timeline
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decomposition::ObservabilityDecomposition;
use crate::detector::{Chi2Config, Detector, DofPolicy};
use crate::diagnosis::{
    decompose, diagnose_run, read_verdicts_csv, write_verdicts_csv, CalibratedThreshold, CalibrationConfig,
    DThreshold, DiagnosisConfig, DiagnosisVerdict, Outcome, OutcomeCounts, RunDiagnosis, RunSummary, ThdSetting,
};
use crate::csvutil::{fmt_f64, write_comment};
use crate::error::{Error, Result};
use crate::estimator::{read_steps_csv, write_steps_csv};
use crate::linalg::{Matrix, Vector};
use crate::model::{
    apply_topology_error, make_random_stable_system, parse_model, render_model, Generator, GridModelSpec,
    GridTopology, Line, MeasurementPoint, NoiseScales, Quantity, SwingNoise, SystemModel,
};
use crate::scenario::{read_measurements_csv, run_scenario, write_scenario_csv, AttackSpec, ScenarioKind, ScenarioSpec, Waveform};

/// Environment variable naming the output directory when the config has none.
pub const OUTPUT_DIR_ENV: &str = "KFDIAG_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "kfdiag-out";

/// Three-generator, nine-bus swing model with a reflection symmetry that
/// swaps generators 1 and 2. Generators sit on buses 1, 2, 3 behind stiff
/// ties to the ring 4-5-7-8-9-6-4; angles are measured at buses 1 to 8.
pub fn nine_bus_surrogate() -> GridModelSpec {
    let mut lines = vec![Line::new(1, 4, 80.0), Line::new(2, 7, 80.0), Line::new(3, 9, 80.0)];
    for (a, b) in [(4, 5), (5, 7), (7, 8), (8, 9), (9, 6), (6, 4)] {
        lines.push(Line::new(a, b, 5.0));
    }
    GridModelSpec {
        topology: GridTopology {
            buses: (1..=9).collect(),
            lines,
            generators: (1..=3).map(|bus| Generator { bus, inertia: 2.0, damping: 0.01 }).collect(),
            dt: 0.05,
        },
        measurements: (1..=8).map(|bus| MeasurementPoint { bus, quantity: Quantity::Angle }).collect(),
        noise: SwingNoise { process_angle: 0.0, process_frequency: 1e-3, meas_angle: 1e-6, meas_frequency: 1e-6 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllKeyword {
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrateKeyword {
    Calibrate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoKeyword {
    Auto,
}

/// `"all"` or an explicit count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DofSetting {
    Count(usize),
    Keyword(AllKeyword),
}

/// A fixed positive value or `"calibrate"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThdValue {
    Value(f64),
    Keyword(CalibrateKeyword),
}

/// A relative tolerance or `"auto"` for the size-dependent default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RankTolValue {
    Value(f64),
    Keyword(AutoKeyword),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builder", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSection {
    /// Swing model; without `grid` the nine-bus surrogate is used.
    Swing { grid: Option<GridModelSpec> },
    Random { n: usize, m: usize, spectral_radius: f64, q: f64, r: f64, seed: u64 },
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindName {
    Normal,
    Malicious,
    ModelError,
}

impl KindName {
    pub fn as_str(self) -> &'static str {
        match self {
            KindName::Normal => "normal",
            KindName::Malicious => "malicious",
            KindName::ModelError => "model_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    /// 1-based channel numbers.
    pub channels: Vec<usize>,
    /// Inclusive step window.
    pub window: [usize; 2],
    #[serde(default = "default_multiplier")]
    pub multiplier: f64,
    #[serde(default)]
    pub waveform: Waveform,
}

fn default_multiplier() -> f64 {
    10.0
}

/// Exactly one of `removed_line`, `true_model_file` and `perturbation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSection {
    pub onset: usize,
    /// Line taken out of service in the plant (swing models).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub removed_line: Option<[u32; 2]>,
    /// Plant model read from a file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_model_file: Option<PathBuf>,
    /// Standard deviation of i.i.d. Gaussian entries added to `A`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<f64>,
    #[serde(default)]
    pub perturbation_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub kinds: Vec<KindName>,
    pub steps: usize,
    pub seed: u64,
    /// Initial state; zeros when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// `P0 = p0_scale·I`.
    pub p0_scale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault: Option<FaultSection>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            kinds: vec![KindName::Normal],
            steps: 300,
            seed: 0,
            x0: None,
            p0_scale: 1e-3,
            attack: None,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub confidence: f64,
    pub th_r: f64,
    pub dof: DofSetting,
}

impl Default for DetectorSection {
    fn default() -> Self {
        DetectorSection { confidence: 0.99, th_r: 3.0, dof: DofSetting::Keyword(AllKeyword::All) }
    }
}

impl DetectorSection {
    pub fn to_config(self) -> Chi2Config {
        Chi2Config {
            confidence: self.confidence,
            th_r: self.th_r,
            dof: match self.dof {
                DofSetting::Count(d) => DofPolicy::Explicit(d),
                DofSetting::Keyword(AllKeyword::All) => DofPolicy::AllMeasurements,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosisSection {
    pub th_d: ThdValue,
    /// `⌈m/2⌉` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_critical: Option<usize>,
    pub burn_in: usize,
    pub rank_tol: RankTolValue,
    /// 1-based channels whose `d` trace is exported for plotting; the
    /// attacked channels when absent, else channel 1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monitor: Option<Vec<usize>>,
    pub calibration: CalibrationConfig,
}

impl Default for DiagnosisSection {
    fn default() -> Self {
        DiagnosisSection {
            th_d: ThdValue::Keyword(CalibrateKeyword::Calibrate),
            n_critical: None,
            burn_in: 20,
            rank_tol: RankTolValue::Keyword(AutoKeyword::Auto),
            monitor: None,
            calibration: CalibrationConfig::default(),
        }
    }
}

impl DiagnosisSection {
    pub fn to_config(&self) -> DiagnosisConfig {
        DiagnosisConfig {
            th_d: match self.th_d {
                ThdValue::Value(v) => ThdSetting::Fixed(v),
                ThdValue::Keyword(_) => ThdSetting::Calibrate,
            },
            n_critical: self.n_critical,
            calibration: self.calibration,
            rank_tol: match self.rank_tol {
                RankTolValue::Value(v) => Some(v),
                RankTolValue::Keyword(_) => None,
            },
            burn_in: self.burn_in,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub scenario_csv: bool,
    pub steps_csv: bool,
    pub verdicts_csv: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: None, scenario_csv: true, steps_csv: true, verdicts_csv: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSection {
    pub num_seeds: usize,
}

impl Default for BatchSection {
    fn default() -> Self {
        BatchSection { num_seeds: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub diagnosis: DiagnosisSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub batch: BatchSection,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parse a `--set` value as a TOML value, falling back to a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Apply `key.path=value` overrides to a TOML table.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for ov in overrides {
        let (path, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{ov}` is not of the form key=value")))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(Error::Config(format!("override `{ov}` has an empty key")));
        }
        let mut cur = &mut *table;
        for k in &keys[..keys.len() - 1] {
            let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{ov}`: `{k}` is not a table")))?;
        }
        cur.insert(keys[keys.len() - 1].to_string(), parse_override_value(raw.trim()));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parse TOML text, then apply overrides. Errors name the offending key
    /// and, for the original text, its line.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let direct: ExperimentConfig = toml::from_str(text).map_err(config_err)?;
        if overrides.is_empty() {
            return Ok(direct);
        }
        let mut table: toml::Table = toml::from_str(text).map_err(config_err)?;
        if matches!(direct.model, ModelSection::Swing { grid: None }) {
            let preset = toml::Value::try_from(nine_bus_surrogate()).map_err(config_err)?;
            if let Some(model) = table.get_mut("model").and_then(toml::Value::as_table_mut) {
                model.insert("grid".into(), preset);
            }
        }
        apply_overrides(&mut table, overrides)?;
        let merged = toml::to_string(&table).map_err(config_err)?;
        toml::from_str(&merged).map_err(|e| Error::Config(format!("after overrides: {e}")))
    }
}

/// A validated experiment with every default made explicit.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub assumed: SystemModel,
    /// Plant model after the fault, when a fault is configured.
    pub faulted: Option<SystemModel>,
    pub x0: Vector,
    pub p0: Matrix,
    pub chi2: Chi2Config,
    pub diagnosis: DiagnosisConfig,
    /// 0-based monitor channels.
    pub monitor: Vec<usize>,
}

fn read_model_file(path: &Path) -> Result<SystemModel> {
    if !path.exists() {
        return Err(Error::Config(format!("model file `{}` does not exist", path.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read `{}`: {e}", path.display())))?;
    parse_model(&text).map_err(|e| Error::Config(format!("`{}`: {e}", path.display())))
}

fn zero_based(channels: &[usize], m: usize, what: &str) -> Result<Vec<usize>> {
    if channels.is_empty() {
        return Err(Error::Config(format!("{what} lists no channels")));
    }
    channels
        .iter()
        .map(|&c| {
            if c == 0 || c > m {
                Err(Error::Config(format!("{what}: channel {c} outside 1..={m}")))
            } else {
                Ok(c - 1)
            }
        })
        .collect()
}

impl Experiment {
    /// Read and resolve a config file. Relative paths inside it are taken
    /// relative to the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Experiment::resolve(ExperimentConfig::from_toml_str(&text, overrides)?, base)
    }

    pub fn resolve(mut cfg: ExperimentConfig, base_dir: &Path) -> Result<Self> {
        let assumed = match &mut cfg.model {
            ModelSection::Swing { grid } => {
                let spec = grid.get_or_insert_with(nine_bus_surrogate);
                spec.build()?
            }
            ModelSection::Random { n, m, spectral_radius, q, r, seed } => {
                make_random_stable_system(*n, *m, *spectral_radius, NoiseScales { q: *q, r: *r }, *seed)?
            }
            ModelSection::File { path } => read_model_file(&base_dir.join(path))?,
        };
        let (n, m) = (assumed.n(), assumed.m());

        let sc = &mut cfg.scenario;
        if sc.kinds.is_empty() {
            return Err(Error::Config("scenario.kinds is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = sc.kinds.iter().find(|k| !seen.insert(**k)) {
            return Err(Error::Config(format!("scenario.kinds lists `{}` twice", dup.as_str())));
        }
        if sc.steps == 0 {
            return Err(Error::Config("scenario.steps must be positive".into()));
        }
        if !(sc.p0_scale >= 0.0) {
            return Err(Error::Config("scenario.p0_scale must be non-negative".into()));
        }
        let x0 = sc.x0.get_or_insert_with(|| vec![0.0; n]);
        if x0.len() != n {
            return Err(Error::Config(format!("scenario.x0 has {} entries, the model has {n} states", x0.len())));
        }
        let x0 = Vector::from_column_slice(x0);
        let p0 = Matrix::identity(n, n) * sc.p0_scale;

        if let Some(attack) = &sc.attack {
            let targets = zero_based(&attack.channels, m, "scenario.attack.channels")?;
            AttackSpec {
                targets,
                window: (attack.window[0], attack.window[1]),
                magnitude_multiplier: attack.multiplier,
                waveform: attack.waveform,
                seed: 0,
            }
            .validate(m, sc.steps)
            .map_err(config_err)?;
        } else if sc.kinds.contains(&KindName::Malicious) {
            return Err(Error::Config("kind `malicious` needs a [scenario.attack] section".into()));
        }

        let faulted = match &sc.fault {
            None if sc.kinds.contains(&KindName::ModelError) => {
                return Err(Error::Config("kind `model_error` needs a [scenario.fault] section".into()))
            }
            None => None,
            Some(fault) => {
                if fault.onset >= sc.steps {
                    return Err(Error::Config(format!("fault onset {} is not before step {}", fault.onset, sc.steps)));
                }
                let set = [fault.removed_line.is_some(), fault.true_model_file.is_some(), fault.perturbation.is_some()];
                if set.iter().filter(|&&b| b).count() != 1 {
                    return Err(Error::Config(
                        "scenario.fault needs exactly one of removed_line, true_model_file, perturbation".into(),
                    ));
                }
                let plant = if let Some([a, b]) = fault.removed_line {
                    let ModelSection::Swing { grid: Some(spec) } = &cfg.model else {
                        return Err(Error::Config("scenario.fault.removed_line requires the swing builder".into()));
                    };
                    apply_topology_error(&assumed, spec, (a, b))?
                } else if let Some(path) = &fault.true_model_file {
                    let plant = read_model_file(&base_dir.join(path))?;
                    if (plant.n(), plant.m()) != (n, m) {
                        return Err(Error::Config(format!(
                            "true model `{}` is {}x{}, assumed model is {n}x{m}",
                            path.display(),
                            plant.n(),
                            plant.m()
                        )));
                    }
                    plant
                } else {
                    let sd = fault.perturbation.unwrap_or_default();
                    if !(sd > 0.0) {
                        return Err(Error::Config("scenario.fault.perturbation must be positive".into()));
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(fault.perturbation_seed);
                    let delta = Matrix::from_fn(n, n, |_, _| { let g: f64 = StandardNormal.sample(&mut rng); sd * g });
                    assumed.with_dynamics(assumed.a() + delta, assumed.h().clone())?
                };
                Some(plant)
            }
        };

        let chi2 = cfg.detector.to_config();
        chi2.validate().map_err(config_err)?;
        let diag = &mut cfg.diagnosis;
        diag.n_critical.get_or_insert(m.div_ceil(2));
        let monitor_default = sc.attack.as_ref().map(|a| a.channels.clone()).unwrap_or_else(|| vec![1]);
        let monitor = zero_based(diag.monitor.get_or_insert(monitor_default), m, "diagnosis.monitor")?;
        let diagnosis = diag.to_config();
        diagnosis.validate().map_err(config_err)?;
        if cfg.batch.num_seeds == 0 {
            return Err(Error::Config("batch.num_seeds must be positive".into()));
        }
        let config_hash = config_hash(&cfg)?;
        Ok(Experiment { config: cfg, config_hash, assumed, faulted, x0, p0, chi2, diagnosis, monitor })
    }

    /// Output directory from the config, else the environment, else the default.
    pub fn output_dir(&self) -> PathBuf {
        self.config
            .output
            .dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    /// Config as echoed in reports: the output directory is left out so that
    /// the same experiment written to two places stays byte-identical.
    pub fn echo(&self) -> ExperimentConfig {
        let mut c = self.config.clone();
        c.output.dir = None;
        c
    }

    fn detector(&self) -> Result<Detector> {
        Detector::new(self.chi2, self.assumed.m())
    }

    fn th_source(&self) -> ThresholdSource {
        match self.diagnosis.th_d {
            ThdSetting::Fixed(v) => ThresholdSource::Fixed(v),
            ThdSetting::Calibrate => ThresholdSource::Calibrated(CalibratedThreshold::new(
                self.assumed.clone(),
                self.x0.clone(),
                self.p0.clone(),
                self.diagnosis.clone(),
            )),
        }
    }
}

fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.output.dir = None;
    let canonical = serde_json::to_string(&c).map_err(config_err)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string())
}

enum ThresholdSource {
    Fixed(f64),
    Calibrated(CalibratedThreshold),
}

impl ThresholdSource {
    fn as_dyn(&self) -> &dyn DThreshold {
        match self {
            ThresholdSource::Fixed(v) => v,
            ThresholdSource::Calibrated(c) => c,
        }
    }

    fn value_for(&self, set: &[usize], dec: &ObservabilityDecomposition) -> Result<f64> {
        self.as_dyn().th_d(set, dec)
    }

    fn calibrated(&self) -> Vec<(Vec<usize>, f64)> {
        match self {
            ThresholdSource::Fixed(_) => Vec::new(),
            ThresholdSource::Calibrated(c) => c.calibrated(),
        }
    }
}

fn derive_seed(base: u64, stream: u64, index: usize) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Noise seed of run `index`; identical across scenario kinds.
pub fn noise_seed(base: u64, index: usize) -> u64 {
    derive_seed(base, 1, index)
}

pub fn attack_seed(base: u64, index: usize) -> u64 {
    derive_seed(base, 2, index)
}

/// One simulated run, before it is written anywhere.
pub struct RunOutput {
    pub kind: KindName,
    pub seed_index: usize,
    pub noise_seed: u64,
    pub attack_seed: Option<u64>,
    pub spec: ScenarioSpec,
    pub run: crate::scenario::ScenarioRun,
    pub diagnosis: RunDiagnosis,
}

impl Experiment {
    pub fn scenario_spec(&self, kind: KindName, seed_index: usize) -> Result<ScenarioSpec> {
        let sc = &self.config.scenario;
        let base = sc.seed;
        let (kind_spec, plant) = match kind {
            KindName::Normal => (ScenarioKind::Normal, self.assumed.clone()),
            KindName::Malicious => {
                let a = sc.attack.as_ref().ok_or_else(|| Error::Config("no attack configured".into()))?;
                (
                    ScenarioKind::Malicious(AttackSpec {
                        targets: a.channels.iter().map(|c| c - 1).collect(),
                        window: (a.window[0], a.window[1]),
                        magnitude_multiplier: a.multiplier,
                        waveform: a.waveform,
                        seed: attack_seed(base, seed_index),
                    }),
                    self.assumed.clone(),
                )
            }
            KindName::ModelError => {
                let f = sc.fault.as_ref().ok_or_else(|| Error::Config("no fault configured".into()))?;
                let plant = self.faulted.clone().ok_or_else(|| Error::Config("no fault configured".into()))?;
                (ScenarioKind::ModelError { onset: f.onset }, plant)
            }
        };
        Ok(ScenarioSpec {
            kind: kind_spec,
            true_model: plant,
            assumed_model: self.assumed.clone(),
            x0: self.x0.clone(),
            p0: self.p0.clone(),
            steps: sc.steps,
            noise_seed: noise_seed(base, seed_index),
        })
    }

    /// Step window the majority verdict of a run is taken over.
    pub fn summary_window(&self, kind: KindName) -> (usize, usize) {
        let sc = &self.config.scenario;
        let last = sc.steps - 1;
        match kind {
            KindName::Normal => (self.diagnosis.burn_in.min(last), last),
            KindName::Malicious => sc.attack.as_ref().map(|a| (a.window[0], a.window[1])).unwrap_or((0, last)),
            KindName::ModelError => sc.fault.as_ref().map(|f| (f.onset, last)).unwrap_or((0, last)),
        }
    }

    fn run_one(&self, kind: KindName, seed_index: usize, th: &dyn DThreshold) -> Result<RunOutput> {
        let spec = self.scenario_spec(kind, seed_index)?;
        let run = run_scenario(&spec)?;
        let diagnosis = diagnose_run(
            &run.measurements_delivered,
            &self.assumed,
            &self.x0,
            &self.p0,
            self.detector()?,
            &self.diagnosis,
            th,
            self.summary_window(kind),
        )?;
        let attack_seed = match &spec.kind {
            ScenarioKind::Malicious(a) => Some(a.seed),
            _ => None,
        };
        Ok(RunOutput { kind, seed_index, noise_seed: spec.noise_seed, attack_seed, spec, run, diagnosis })
    }

    /// Simulate and diagnose a single run in memory.
    pub fn run_single(&self, kind: KindName, seed_index: usize) -> Result<RunOutput> {
        let th = self.th_source();
        self.run_one(kind, seed_index, th.as_dyn())
    }

    fn artifact_comment(&self, run: &RunOutput) -> String {
        format!(
            "config_hash={} seed={} kind={} seed_index={}",
            self.config_hash,
            run.noise_seed,
            run.kind.as_str(),
            run.seed_index
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelThreshold {
    /// 1-based channels.
    pub channels: Vec<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub th_chi: f64,
    pub th_r: f64,
    pub n_critical: usize,
    /// `TH_d` per suspicious set, for every set that needed one.
    pub th_d: Vec<ChannelThreshold>,
    /// `TH_d` for the monitor channels, when they leave part of the state
    /// unobservable.
    pub monitor_th_d: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRow {
    pub kind: KindName,
    pub majority: OutcomeCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub kind: KindName,
    pub seed_index: usize,
    pub noise_seed: u64,
    pub attack_seed: Option<u64>,
    pub summary: RunSummary,
    /// Verdict timeline relative to the output directory, when written.
    pub verdicts: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub num_seeds: usize,
    pub m: usize,
    pub n: usize,
    pub thresholds: ThresholdReport,
    /// True scenario kind × majority verdict over the summary window.
    pub confusion: Vec<ConfusionRow>,
    /// Share of normal runs whose majority verdict is not `no_anomaly`.
    pub false_alarm_rate: Option<f64>,
    /// Share of anomalous runs whose majority verdict is `no_anomaly`.
    pub missed_detection_rate: Option<f64>,
    pub runs: Vec<RunEntry>,
    /// Verdict timelines in run order; not serialized.
    #[serde(skip)]
    pub timelines: Vec<Vec<DiagnosisVerdict>>,
}

impl ExperimentReport {
    pub fn confusion_row(&self, kind: KindName) -> Option<&OutcomeCounts> {
        self.confusion.iter().find(|r| r.kind == kind).map(|r| &r.majority)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeInfo {
    pub elapsed_seconds: f64,
    pub threads: usize,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Run every configured scenario kind for every seed. Artifacts are written
/// when `out_dir` is given.
pub fn run_experiment(exp: &Experiment, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    let started = Instant::now();
    let th = exp.th_source();
    let kinds = exp.config.scenario.kinds.clone();
    let num_seeds = exp.config.batch.num_seeds;
    let jobs: Vec<(usize, KindName)> =
        (0..num_seeds).flat_map(|i| kinds.iter().map(move |&k| (i, k))).collect();
    let out = &exp.config.output;
    let m = exp.assumed.m();

    // Workers render their own artifacts; files are written below in run order.
    let results: Vec<(RunOutput, Vec<(String, Vec<u8>)>)> = jobs
        .par_iter()
        .map(|&(i, kind)| -> Result<_> {
            let run = exp.run_one(kind, i, th.as_dyn())?;
            let mut files = Vec::new();
            if out_dir.is_some() {
                let comment = exp.artifact_comment(&run);
                let dir = format!("{}/seed_{}", kind.as_str(), i);
                if out.scenario_csv {
                    let mut buf = Vec::new();
                    write_scenario_csv(&run.run, &mut buf, Some(&comment))?;
                    files.push((format!("{dir}/scenario.csv"), buf));
                }
                if out.steps_csv {
                    let mut buf = Vec::new();
                    write_steps_csv(&run.diagnosis.records, &mut buf, Some(&comment))?;
                    files.push((format!("{dir}/steps.csv"), buf));
                }
                if out.verdicts_csv {
                    let mut buf = Vec::new();
                    write_verdicts_csv(&run.diagnosis.verdicts, m, &mut buf, Some(&comment))?;
                    files.push((format!("{dir}/verdicts.csv"), buf));
                }
            }
            Ok((run, files))
        })
        .collect::<Result<_>>()?;

    let monitor_th_d = {
        let dec = decompose(&exp.assumed, &exp.monitor, exp.diagnosis.rank_tol)?;
        if dec.is_rank_deficient() {
            Some(th.value_for(&exp.monitor, &dec)?)
        } else {
            None
        }
    };

    let detector = exp.detector()?;
    let mut confusion: Vec<ConfusionRow> =
        kinds.iter().map(|&kind| ConfusionRow { kind, majority: OutcomeCounts::default() }).collect();
    let mut runs = Vec::with_capacity(results.len());
    let mut timelines = Vec::with_capacity(results.len());
    let (mut normal, mut false_alarms, mut anomalous, mut missed) = (0usize, 0usize, 0usize, 0usize);
    for (run, files) in results {
        let majority = run.diagnosis.summary.majority;
        if let Some(row) = confusion.iter_mut().find(|r| r.kind == run.kind) {
            row.majority.add(majority);
        }
        if run.kind == KindName::Normal {
            normal += 1;
            false_alarms += usize::from(majority != Outcome::NoAnomaly);
        } else {
            anomalous += 1;
            missed += usize::from(majority == Outcome::NoAnomaly);
        }
        let verdicts_path = files.iter().map(|(p, _)| p).find(|p| p.ends_with("verdicts.csv")).cloned();
        if let Some(dir) = out_dir {
            for (rel, bytes) in &files {
                write_file(&dir.join(rel), bytes)?;
            }
        }
        runs.push(RunEntry {
            kind: run.kind,
            seed_index: run.seed_index,
            noise_seed: run.noise_seed,
            attack_seed: run.attack_seed,
            summary: run.diagnosis.summary.clone(),
            verdicts: verdicts_path,
        });
        timelines.push(run.diagnosis.verdicts);
    }
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let report = ExperimentReport {
        config_hash: exp.config_hash.clone(),
        config: exp.echo(),
        num_seeds,
        m,
        n: exp.assumed.n(),
        thresholds: ThresholdReport {
            th_chi: detector.th_chi(),
            th_r: exp.chi2.th_r,
            n_critical: exp.diagnosis.resolve_n_critical(m),
            th_d: th
                .calibrated()
                .into_iter()
                .map(|(set, value)| ChannelThreshold { channels: set.iter().map(|c| c + 1).collect(), value })
                .collect(),
            monitor_th_d,
        },
        confusion,
        false_alarm_rate: rate(false_alarms, normal),
        missed_detection_rate: rate(missed, anomalous),
        runs,
        timelines,
    };
    if let Some(dir) = out_dir {
        let header = format!("# config_hash={} seed={}\n", exp.config_hash, exp.config.scenario.seed);
        write_file(&dir.join("assumed_model.txt"), format!("{header}{}", render_model(&exp.assumed)).as_bytes())?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Io(e.to_string()))?;
        write_file(&dir.join("report.json"), format!("{json}\n").as_bytes())?;
        let runtime = RuntimeInfo {
            elapsed_seconds: started.elapsed().as_secs_f64(),
            threads: rayon::current_num_threads(),
        };
        let json = serde_json::to_string_pretty(&runtime).map_err(|e| Error::Io(e.to_string()))?;
        write_file(&dir.join("runtime.json"), format!("{json}\n").as_bytes())?;
    }
    Ok(report)
}

/// Detector and diagnosis settings for replaying an external trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplaySettings {
    pub detector: DetectorSection,
    pub diagnosis: DiagnosisSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    pub p0_scale: f64,
}

impl Default for ReplaySettings {
    fn default() -> Self {
        ReplaySettings {
            detector: DetectorSection::default(),
            diagnosis: DiagnosisSection::default(),
            x0: None,
            p0_scale: ScenarioSection::default().p0_scale,
        }
    }
}

impl ReplaySettings {
    /// Take `detector`, `diagnosis`, `scenario.x0` and `scenario.p0_scale`
    /// from an experiment config (if any), then apply overrides. Override
    /// keys use the experiment-config paths.
    pub fn from_sources(config_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match config_text {
            Some(text) => toml::from_str(text).map_err(config_err)?,
            None => toml::Table::new(),
        };
        apply_overrides(&mut table, overrides)?;
        let mut picked = toml::Table::new();
        for key in ["detector", "diagnosis"] {
            if let Some(v) = table.remove(key) {
                picked.insert(key.into(), v);
            }
        }
        if let Some(sc) = table.remove("scenario").as_ref().and_then(toml::Value::as_table) {
            for key in ["x0", "p0_scale"] {
                if let Some(v) = sc.get(key) {
                    picked.insert(key.into(), v.clone());
                }
            }
        }
        let text = toml::to_string(&picked).map_err(config_err)?;
        toml::from_str(&text).map_err(config_err)
    }

    /// Short content hash, embedded in replay artifacts.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(self).map_err(config_err)?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string())
    }
}

/// Filter, detect and diagnose an external measurement trace with `model`.
/// The summary covers every step after the burn-in.
pub fn replay(measurements_csv: &str, model: &SystemModel, settings: &ReplaySettings) -> Result<RunDiagnosis> {
    let z = read_measurements_csv(measurements_csv, model.m())?;
    if z.nrows() == 0 {
        return Err(Error::arg("measurement trace has no rows"));
    }
    let n = model.n();
    let x0 = match &settings.x0 {
        Some(v) if v.len() != n => {
            return Err(Error::Config(format!("x0 has {} entries, the model has {n} states", v.len())))
        }
        Some(v) => Vector::from_column_slice(v),
        None => Vector::zeros(n),
    };
    let p0 = Matrix::identity(n, n) * settings.p0_scale;
    let chi2 = settings.detector.to_config();
    chi2.validate().map_err(config_err)?;
    let diag = settings.diagnosis.to_config();
    diag.validate().map_err(config_err)?;
    let detector = Detector::new(chi2, model.m())?;
    let last = z.nrows() - 1;
    let window = (diag.burn_in.min(last), last);
    match diag.th_d {
        ThdSetting::Fixed(v) => diagnose_run(&z, model, &x0, &p0, detector, &diag, &v, window),
        ThdSetting::Calibrate => {
            let th = CalibratedThreshold::new(model.clone(), x0.clone(), p0.clone(), diag.clone());
            diagnose_run(&z, model, &x0, &p0, detector, &diag, &th, window)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub config_hash: String,
    /// 1-based channels.
    pub channels: Vec<usize>,
    pub n1: usize,
    pub th_d: f64,
    pub runs: usize,
    pub steps: usize,
    pub quantile: f64,
}

/// Calibrate `TH_d` for the monitor channels of an experiment.
pub fn calibrate(exp: &Experiment) -> Result<CalibrationReport> {
    let dec = decompose(&exp.assumed, &exp.monitor, exp.diagnosis.rank_tol)?;
    let th = crate::diagnosis::calibrate_th_d(&exp.assumed, &exp.monitor, &exp.x0, &exp.p0, &exp.diagnosis)?;
    let c = &exp.diagnosis.calibration;
    Ok(CalibrationReport {
        config_hash: exp.config_hash.clone(),
        channels: exp.monitor.iter().map(|c| c + 1).collect(),
        n1: dec.n1,
        th_d: th,
        runs: c.runs,
        steps: c.steps,
        quantile: c.quantile,
    })
}

/// Per-step `d` for the monitor channels, rebuilt from a step trace.
fn monitor_d_trace(
    steps_csv: &str,
    model: &SystemModel,
    x0: &Vector,
    dec: &ObservabilityDecomposition,
) -> Result<Vec<f64>> {
    let table = read_steps_csv(steps_csv)?;
    if table.x_post.ncols() != model.n() {
        return Err(Error::arg("step trace does not match the model's state dimension"));
    }
    (0..table.k.len())
        .map(|row| {
            let x_pred = if row == 0 {
                x0.clone()
            } else {
                model.a() * table.x_post.row(row - 1).transpose()
            };
            dec.d_for_step(&x_pred, &table.x_post.row(row).transpose())
        })
        .collect()
}

fn read_artifact(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Write plot-ready CSVs for one seed of an experiment directory:
/// `residuals_<kind>.csv` (k, r_i…, TH_r), `chi2_<kind>.csv` (k, c, TH_chi)
/// and `d_compare.csv` (k, d per scenario kind, TH_d). Returns the written
/// paths.
pub fn emit_plot_data(artifact_dir: &Path, seed_index: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let report: ExperimentReport = serde_json::from_str(&read_artifact(&artifact_dir.join("report.json"))?)
        .map_err(|e| Error::parse(e.line(), format!("report.json: {e}")))?;
    let model = parse_model(&read_artifact(&artifact_dir.join("assumed_model.txt"))?)?;
    let m = model.m();
    let comment = format!("config_hash={} seed_index={seed_index}", report.config_hash);
    let th = &report.thresholds;
    let mut written = Vec::new();
    let mut d_traces: Vec<(KindName, Vec<f64>)> = Vec::new();

    let x0 = Vector::from_column_slice(report.config.scenario.x0.as_deref().unwrap_or(&vec![0.0; model.n()]));
    let monitor: Vec<usize> =
        report.config.diagnosis.monitor.clone().unwrap_or_else(|| vec![1]).iter().map(|c| c - 1).collect();
    let rank_tol = report.config.diagnosis.to_config().rank_tol;
    let dec = decompose(&model, &monitor, rank_tol)?;

    for &kind in &report.config.scenario.kinds {
        let steps_path = artifact_dir.join(format!("{}/seed_{seed_index}/steps.csv", kind.as_str()));
        let text = read_artifact(&steps_path)?;
        let table = read_steps_csv(&text)?;
        if table.z_tilde.ncols() != m {
            return Err(Error::arg(format!("{}: channel count differs from the model", steps_path.display())));
        }

        let mut buf = Vec::new();
        write_comment(&mut buf, Some(&comment))?;
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut header = vec!["k".to_string()];
        header.extend((1..=m).map(|i| format!("r_{i}")));
        header.push("TH_r".into());
        w.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
        for (row, &k) in table.k.iter().enumerate() {
            let mut rec = vec![k.to_string()];
            rec.extend((0..m).map(|i| fmt_f64(table.z_tilde[(row, i)].abs() / table.s_diag[(row, i)].sqrt())));
            rec.push(fmt_f64(th.th_r));
            w.write_record(&rec).map_err(|e| Error::Io(e.to_string()))?;
        }
        drop(w);
        let path = out_dir.join(format!("residuals_{}.csv", kind.as_str()));
        write_file(&path, &buf)?;
        written.push(path);

        let mut buf = Vec::new();
        write_comment(&mut buf, Some(&comment))?;
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["k", "c", "TH_chi"]).map_err(|e| Error::Io(e.to_string()))?;
        for (row, &k) in table.k.iter().enumerate() {
            w.write_record([k.to_string(), fmt_f64(table.c[row]), fmt_f64(th.th_chi)])
                .map_err(|e| Error::Io(e.to_string()))?;
        }
        drop(w);
        let path = out_dir.join(format!("chi2_{}.csv", kind.as_str()));
        write_file(&path, &buf)?;
        written.push(path);

        if dec.is_rank_deficient() {
            d_traces.push((kind, monitor_d_trace(&text, &model, &x0, &dec)?));
        }
    }

    match th.monitor_th_d {
        Some(th_d) if dec.is_rank_deficient() => {
            let all = [KindName::Normal, KindName::Malicious, KindName::ModelError];
            let len = d_traces.iter().map(|(_, d)| d.len()).max().unwrap_or(0);
            let mut buf = Vec::new();
            write_comment(&mut buf, Some(&comment))?;
            let mut w = csv::Writer::from_writer(&mut buf);
            let mut header = vec!["k".to_string()];
            header.extend(all.iter().map(|k| format!("d_{}", k.as_str())));
            header.push("TH_d".into());
            w.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
            for k in 0..len {
                let mut rec = vec![k.to_string()];
                for kind in all {
                    let cell = d_traces
                        .iter()
                        .find(|(kk, _)| *kk == kind)
                        .and_then(|(_, d)| d.get(k))
                        .map(|&v| fmt_f64(v))
                        .unwrap_or_default();
                    rec.push(cell);
                }
                rec.push(fmt_f64(th_d));
                w.write_record(&rec).map_err(|e| Error::Io(e.to_string()))?;
            }
            drop(w);
            let path = out_dir.join("d_compare.csv");
            write_file(&path, &buf)?;
            written.push(path);
        }
        _ => log::warn!("monitor channels observe the full state; d_compare.csv not written"),
    }
    Ok(written)
}

/// Read a verdict timeline written by an experiment or by replay.
pub fn load_verdicts(path: &Path) -> Result<Vec<crate::diagnosis::VerdictRow>> {
    read_verdicts_csv(&read_artifact(path)?)
}
