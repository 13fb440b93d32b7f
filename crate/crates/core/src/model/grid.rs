//! Linearized swing dynamics for a small grid.
//!
//! Each generator contributes a rotor angle and a frequency deviation,
//! `δ̇ᵢ = ωᵢ` and `Mᵢ·ω̇ᵢ = −Dᵢ·ωᵢ − Σⱼ bᵢⱼ(δᵢ − δⱼ)`, with the coupling taken
//! from the Kron-reduced susceptance Laplacian so that buses without a
//! generator are eliminated. Angles at non-generator buses are the
//! corresponding linear combinations of generator angles, which is also how
//! they enter `H`. The continuous Jacobian is discretized exactly over `dt`
//! with the matrix exponential.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::SystemModel;
use crate::error::{Error, Result};
use crate::linalg::{expm, Matrix};

pub type BusId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Line {
    pub from: BusId,
    pub to: BusId,
    /// Per-unit susceptance, positive.
    pub susceptance: f64,
    #[serde(default = "in_service_default")]
    pub in_service: bool,
}

fn in_service_default() -> bool {
    true
}

impl Line {
    pub fn new(from: BusId, to: BusId, susceptance: f64) -> Self {
        Line { from, to, susceptance, in_service: true }
    }

    fn joins(&self, a: BusId, b: BusId) -> bool {
        (self.from == a && self.to == b) || (self.from == b && self.to == a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    pub bus: BusId,
    /// Inertia constant `M` in s².
    pub inertia: f64,
    /// Damping `D` in s.
    pub damping: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridTopology {
    pub buses: Vec<BusId>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    /// Sample time in seconds.
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Angle,
    Frequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementPoint {
    pub bus: BusId,
    pub quantity: Quantity,
}

/// Per-step noise variances for the swing model. `Q` and `R` are diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwingNoise {
    pub process_angle: f64,
    pub process_frequency: f64,
    pub meas_angle: f64,
    pub meas_frequency: f64,
}

impl GridTopology {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::model("sample time dt must be positive"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &b in &self.buses {
            if !seen.insert(b) {
                return Err(Error::model(format!("bus {b} listed twice")));
            }
        }
        for l in &self.lines {
            if l.from == l.to {
                return Err(Error::model(format!("line {}-{} is a self-loop", l.from, l.to)));
            }
            if !seen.contains(&l.from) || !seen.contains(&l.to) {
                return Err(Error::model(format!("line {}-{} references an unknown bus", l.from, l.to)));
            }
            if !(l.susceptance > 0.0) {
                return Err(Error::model(format!("line {}-{} needs positive susceptance", l.from, l.to)));
            }
        }
        if self.generators.is_empty() {
            return Err(Error::model("at least one generator is required"));
        }
        let mut gen_buses = std::collections::BTreeSet::new();
        for g in &self.generators {
            if !seen.contains(&g.bus) {
                return Err(Error::model(format!("generator at unknown bus {}", g.bus)));
            }
            if !gen_buses.insert(g.bus) {
                return Err(Error::model(format!("more than one generator at bus {}", g.bus)));
            }
            if !(g.inertia > 0.0) || !(g.damping >= 0.0) {
                return Err(Error::model(format!("generator at bus {} needs M > 0 and D >= 0", g.bus)));
            }
        }
        Ok(())
    }

    /// The same topology with the line between `a` and `b` out of service.
    pub fn without_line(&self, a: BusId, b: BusId) -> Result<GridTopology> {
        self.set_line_service(a, b, false)
    }

    /// The same topology with the line between `a` and `b` back in service.
    pub fn with_line_restored(&self, a: BusId, b: BusId) -> Result<GridTopology> {
        self.set_line_service(a, b, true)
    }

    fn set_line_service(&self, a: BusId, b: BusId, in_service: bool) -> Result<GridTopology> {
        let mut out = self.clone();
        let mut found = false;
        for l in out.lines.iter_mut().filter(|l| l.joins(a, b)) {
            l.in_service = in_service;
            found = true;
        }
        if !found {
            return Err(Error::arg(format!("no line between buses {a} and {b}")));
        }
        Ok(out)
    }

    /// Laplacian of the in-service susceptance graph, indexed like `buses`.
    fn laplacian(&self, index: &BTreeMap<BusId, usize>) -> Matrix {
        let nb = self.buses.len();
        let mut l = Matrix::zeros(nb, nb);
        for line in self.lines.iter().filter(|l| l.in_service) {
            let (i, j) = (index[&line.from], index[&line.to]);
            l[(i, i)] += line.susceptance;
            l[(j, j)] += line.susceptance;
            l[(i, j)] -= line.susceptance;
            l[(j, i)] -= line.susceptance;
        }
        l
    }

    /// Connected components of the in-service graph as a component id per bus.
    fn components(&self, index: &BTreeMap<BusId, usize>) -> Vec<usize> {
        let nb = self.buses.len();
        let mut adj = vec![Vec::new(); nb];
        for line in self.lines.iter().filter(|l| l.in_service) {
            let (i, j) = (index[&line.from], index[&line.to]);
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut comp = vec![usize::MAX; nb];
        let mut next = 0;
        for start in 0..nb {
            if comp[start] != usize::MAX {
                continue;
            }
            comp[start] = next;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in &adj[u] {
                    if comp[v] == usize::MAX {
                        comp[v] = next;
                        queue.push_back(v);
                    }
                }
            }
            next += 1;
        }
        comp
    }
}

/// Result of Kron-reducing the network onto the generator buses.
struct Reduction {
    /// Reduced Laplacian between generators (g×g).
    coupling: Matrix,
    /// For each bus, the row mapping generator angles to the bus angle, or
    /// `None` when the bus is not connected to any generator.
    bus_maps: BTreeMap<BusId, Option<Vec<f64>>>,
    generators_connected: bool,
}

fn kron_reduce(topology: &GridTopology) -> Result<Reduction> {
    topology.validate()?;
    let index: BTreeMap<BusId, usize> =
        topology.buses.iter().enumerate().map(|(i, &b)| (b, i)).collect();
    let lap = topology.laplacian(&index);
    let comp = topology.components(&index);
    let gen_idx: Vec<usize> = topology.generators.iter().map(|g| index[&g.bus]).collect();
    let g = gen_idx.len();

    let gen_components: std::collections::BTreeSet<usize> = gen_idx.iter().map(|&i| comp[i]).collect();
    // Non-generator buses reachable from some generator; the rest float.
    let load_idx: Vec<usize> = (0..topology.buses.len())
        .filter(|i| !gen_idx.contains(i) && gen_components.contains(&comp[*i]))
        .collect();

    let l_gg = Matrix::from_fn(g, g, |r, c| lap[(gen_idx[r], gen_idx[c])]);
    let nl = load_idx.len();
    let (coupling, load_map) = if nl == 0 {
        (l_gg, Matrix::zeros(0, g))
    } else {
        let l_nn = Matrix::from_fn(nl, nl, |r, c| lap[(load_idx[r], load_idx[c])]);
        let l_ng = Matrix::from_fn(nl, g, |r, c| lap[(load_idx[r], gen_idx[c])]);
        let lu = l_nn.lu();
        // θ_N = −L_NN⁻¹·L_NG·δ
        let map = -lu
            .solve(&l_ng)
            .ok_or_else(|| Error::model("network reduction failed: singular load-bus block"))?;
        let coupling = &l_gg + l_ng.transpose() * &map;
        (coupling, map)
    };

    let mut bus_maps = BTreeMap::new();
    for (bi, &bus) in topology.buses.iter().enumerate() {
        let row = if let Some(gpos) = gen_idx.iter().position(|&x| x == bi) {
            let mut v = vec![0.0; g];
            v[gpos] = 1.0;
            Some(v)
        } else if let Some(lpos) = load_idx.iter().position(|&x| x == bi) {
            Some(load_map.row(lpos).iter().copied().collect())
        } else {
            None
        };
        bus_maps.insert(bus, row);
    }
    Ok(Reduction { coupling, bus_maps, generators_connected: gen_components.len() == 1 })
}

/// Continuous-time Jacobian with state ordering `[δ₁…δ_g, ω₁…ω_g]`.
pub fn continuous_jacobian(topology: &GridTopology) -> Result<Matrix> {
    Ok(jacobian_from(topology, &kron_reduce(topology)?))
}

fn jacobian_from(topology: &GridTopology, red: &Reduction) -> Matrix {
    let g = topology.generators.len();
    let mut j = Matrix::zeros(2 * g, 2 * g);
    for (i, gen) in topology.generators.iter().enumerate() {
        j[(i, g + i)] = 1.0;
        for k in 0..g {
            j[(g + i, k)] = -red.coupling[(i, k)] / gen.inertia;
        }
        j[(g + i, g + i)] = -gen.damping / gen.inertia;
    }
    j
}

/// Everything needed to (re)build a swing model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridModelSpec {
    pub topology: GridTopology,
    pub measurements: Vec<MeasurementPoint>,
    pub noise: SwingNoise,
}

impl GridModelSpec {
    pub fn build(&self) -> Result<SystemModel> {
        make_swing_grid_model(&self.topology, &self.measurements, self.noise)
    }
}

fn dynamics(topology: &GridTopology, meas: &[MeasurementPoint]) -> Result<(Matrix, Matrix)> {
    if meas.is_empty() {
        return Err(Error::arg("at least one measurement is required"));
    }
    let red = kron_reduce(topology)?;
    if !red.generators_connected {
        log::warn!("generator network is disconnected; the model decouples into islands");
    }
    let g = topology.generators.len();
    let a = expm(&(jacobian_from(topology, &red) * topology.dt));
    let mut h = Matrix::zeros(meas.len(), 2 * g);
    for (row, point) in meas.iter().enumerate() {
        let map = red
            .bus_maps
            .get(&point.bus)
            .ok_or_else(|| Error::arg(format!("measured bus {} does not exist", point.bus)))?
            .as_ref()
            .ok_or_else(|| {
                Error::model(format!("measured bus {} is not connected to any generator", point.bus))
            })?;
        let offset = match point.quantity {
            Quantity::Angle => 0,
            Quantity::Frequency => g,
        };
        for (k, &w) in map.iter().enumerate() {
            h[(row, offset + k)] = w;
        }
    }
    Ok((a, h))
}

/// Build the discretized swing model and its measurement selector.
pub fn make_swing_grid_model(
    topology: &GridTopology,
    meas: &[MeasurementPoint],
    noise: SwingNoise,
) -> Result<SystemModel> {
    let (a, h) = dynamics(topology, meas)?;
    let g = topology.generators.len();
    let q_diag: Vec<f64> = (0..2 * g)
        .map(|i| if i < g { noise.process_angle } else { noise.process_frequency })
        .collect();
    let r_diag: Vec<f64> = meas
        .iter()
        .map(|p| match p.quantity {
            Quantity::Angle => noise.meas_angle,
            Quantity::Frequency => noise.meas_frequency,
        })
        .collect();
    let state_labels = topology
        .generators
        .iter()
        .map(|gen| format!("delta_{}", gen.bus))
        .chain(topology.generators.iter().map(|gen| format!("omega_{}", gen.bus)))
        .collect();
    let meas_labels = meas
        .iter()
        .map(|p| match p.quantity {
            Quantity::Angle => format!("theta_{}", p.bus),
            Quantity::Frequency => format!("freq_{}", p.bus),
        })
        .collect();
    SystemModel::with_labels(
        a,
        h,
        Matrix::from_diagonal(&nalgebra::DVector::from_vec(q_diag)),
        Matrix::from_diagonal(&nalgebra::DVector::from_vec(r_diag)),
        state_labels,
        meas_labels,
    )
}

/// The post-fault plant: `spec`'s grid with `removed_line` out of service.
/// Noise covariances and labels are taken from `model`.
pub fn apply_topology_error(
    model: &SystemModel,
    spec: &GridModelSpec,
    removed_line: (BusId, BusId),
) -> Result<SystemModel> {
    let faulted = spec.topology.without_line(removed_line.0, removed_line.1)?;
    let (a, h) = dynamics(&faulted, &spec.measurements)?;
    if a.shape() != model.a().shape() || h.shape() != model.h().shape() {
        return Err(Error::arg("model does not match the grid specification"));
    }
    model.with_dynamics(a, h)
}
