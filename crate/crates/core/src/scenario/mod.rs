//! Ground-truth trajectories and delivered measurement streams for the
//! normal, malicious-data and modeling-error experiments.

mod csv_io;

pub use csv_io::{read_measurements_csv, read_scenario_csv, write_scenario_csv};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{covariance_sqrt, Matrix, Vector};
use crate::model::SystemModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Waveform {
    #[default]
    Gaussian,
    ConstantBias,
}

/// Additive manipulation of delivered measurements, `z′ = z + a`.
///
/// Target indices are zero-based channel indices; `window` is an inclusive
/// range of step indices.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub targets: Vec<usize>,
    pub window: (usize, usize),
    /// Attack size as a multiple of the channel's noise standard deviation.
    pub magnitude_multiplier: f64,
    pub waveform: Waveform,
    pub seed: u64,
}

impl AttackSpec {
    pub fn validate(&self, m: usize, steps: usize) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::arg("attack needs at least one target channel"));
        }
        if let Some(&t) = self.targets.iter().find(|&&t| t >= m) {
            return Err(Error::arg(format!("attack target {t} out of range 0..{m}")));
        }
        let mut sorted = self.targets.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.targets.len() {
            return Err(Error::arg("attack targets must be distinct"));
        }
        let (start, end) = self.window;
        if start > end {
            return Err(Error::arg(format!("attack window [{start}, {end}] is empty")));
        }
        if end >= steps {
            return Err(Error::arg(format!("attack window ends at {end}, beyond the last step {}", steps - 1)));
        }
        if !(self.magnitude_multiplier > 0.0) {
            return Err(Error::arg("attack magnitude multiplier must be positive"));
        }
        Ok(())
    }

    pub fn covers(&self, k: usize) -> bool {
        k >= self.window.0 && k <= self.window.1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioKind {
    Normal,
    Malicious(AttackSpec),
    /// The plant switches to the true model at `onset`; the estimator keeps
    /// the assumed one.
    ModelError { onset: usize },
}

impl ScenarioKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::Normal => "normal",
            ScenarioKind::Malicious(_) => "malicious",
            ScenarioKind::ModelError { .. } => "model_error",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub true_model: SystemModel,
    pub assumed_model: SystemModel,
    pub x0: Vector,
    pub p0: Matrix,
    pub steps: usize,
    pub noise_seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::arg("scenario needs at least one step"));
        }
        let n = self.assumed_model.n();
        if self.true_model.n() != n || self.true_model.m() != self.assumed_model.m() {
            return Err(Error::arg("true and assumed models have different dimensions"));
        }
        if self.x0.len() != n || self.p0.shape() != (n, n) {
            return Err(Error::arg("initial state or covariance has the wrong dimension"));
        }
        match &self.kind {
            ScenarioKind::Normal | ScenarioKind::Malicious(_) => {
                if self.true_model != self.assumed_model {
                    return Err(Error::arg("normal and malicious scenarios need identical true and assumed models"));
                }
            }
            ScenarioKind::ModelError { onset } => {
                if self.true_model.max_abs_diff(&self.assumed_model) == 0.0 {
                    return Err(Error::arg("model-error scenario needs differing true and assumed models"));
                }
                if *onset >= self.steps {
                    return Err(Error::arg(format!("fault onset {onset} is not before step {}", self.steps)));
                }
            }
        }
        if let ScenarioKind::Malicious(attack) = &self.kind {
            attack.validate(self.true_model.m(), self.steps)?;
        }
        Ok(())
    }
}

/// Which model generated the plant at a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPhase {
    Assumed,
    True,
}

impl ModelPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelPhase::Assumed => "assumed",
            ModelPhase::True => "true",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRun {
    /// `steps × n`; row `k` is `x(k)`, row 0 is the initial state.
    pub states: Matrix,
    /// `steps × m`; row `k` is `z(k) = H·x(k) + v(k)`.
    pub measurements_clean: Matrix,
    /// What the estimator receives: `measurements_clean + attack_trace`.
    pub measurements_delivered: Matrix,
    pub attack_trace: Matrix,
    pub model_schedule: Vec<ModelPhase>,
}

/// Simulate a switched plant. `schedule[k]` picks the model for the
/// transition into step `k` and for `z(k)`; the initial state is given.
///
/// Noise is drawn as standard normals in a fixed order (for step 0 only
/// `v(0)`, then `w(k−1)` and `v(k)` for each later step) and scaled by a
/// square root of the active covariance, so switching models does not shift
/// the random stream.
fn simulate_switched(
    models: [&SystemModel; 2],
    schedule: &[ModelPhase],
    x0: &Vector,
    seed: u64,
) -> Result<(Matrix, Matrix)> {
    let n = models[0].n();
    let m = models[0].m();
    if x0.len() != n {
        return Err(Error::arg(format!("x0 has length {}, expected {n}", x0.len())));
    }
    let roots = models
        .iter()
        .map(|mdl| Ok((covariance_sqrt(mdl.q())?, covariance_sqrt(mdl.r())?)))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normals = |len: usize| -> Vector { Vector::from_fn(len, |_, _| StandardNormal.sample(&mut rng)) };

    let steps = schedule.len();
    let mut states = Matrix::zeros(steps, n);
    let mut meas = Matrix::zeros(steps, m);
    let mut x = x0.clone();
    for (k, &phase) in schedule.iter().enumerate() {
        let idx = match phase {
            ModelPhase::Assumed => 0,
            ModelPhase::True => 1,
        };
        let (model, (q_root, r_root)) = (models[idx], &roots[idx]);
        if k > 0 {
            let w = q_root * normals(n);
            x = model.a() * &x + w;
        }
        let v = r_root * normals(m);
        let z = model.h() * &x + v;
        states.row_mut(k).copy_from(&x.transpose());
        meas.row_mut(k).copy_from(&z.transpose());
    }
    Ok((states, meas))
}

/// `x(k+1) = A·x(k) + w(k)`, `z(k) = H·x(k) + v(k)` for `k = 0..steps`.
pub fn simulate_trajectory(
    model: &SystemModel,
    x0: &Vector,
    steps: usize,
    seed: u64,
) -> Result<(Matrix, Matrix)> {
    if steps == 0 {
        return Err(Error::arg("need at least one step"));
    }
    simulate_switched([model, model], &vec![ModelPhase::Assumed; steps], x0, seed)
}

/// Add the attack to a measurement stream, returning the manipulated stream
/// and the attack trace. Attacked channels receive independent draws.
pub fn inject_attack(measurements: &Matrix, spec: &AttackSpec, r: &Matrix) -> Result<(Matrix, Matrix)> {
    let (steps, m) = measurements.shape();
    spec.validate(m, steps)?;
    if r.shape() != (m, m) {
        return Err(Error::arg("R does not match the measurement width"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut trace = Matrix::zeros(steps, m);
    for k in spec.window.0..=spec.window.1 {
        for &t in &spec.targets {
            let size = spec.magnitude_multiplier * r[(t, t)].sqrt();
            trace[(k, t)] = match spec.waveform {
                Waveform::Gaussian => {
                    let draw: f64 = StandardNormal.sample(&mut rng);
                    size * draw
                }
                Waveform::ConstantBias => size,
            };
        }
    }
    Ok((measurements + &trace, trace))
}

pub fn run_scenario(spec: &ScenarioSpec) -> Result<ScenarioRun> {
    spec.validate()?;
    let schedule: Vec<ModelPhase> = match spec.kind {
        ScenarioKind::ModelError { onset } => (0..spec.steps)
            .map(|k| if k < onset { ModelPhase::Assumed } else { ModelPhase::True })
            .collect(),
        _ => vec![ModelPhase::True; spec.steps],
    };
    let (states, clean) =
        simulate_switched([&spec.assumed_model, &spec.true_model], &schedule, &spec.x0, spec.noise_seed)?;
    let (delivered, trace) = match &spec.kind {
        ScenarioKind::Malicious(attack) => inject_attack(&clean, attack, spec.true_model.r())?,
        _ => (clean.clone(), Matrix::zeros(clean.nrows(), clean.ncols())),
    };
    Ok(ScenarioRun {
        states,
        measurements_clean: clean,
        measurements_delivered: delivered,
        attack_trace: trace,
        model_schedule: schedule,
    })
}
