//! Measurement functions `h(x)`, their Jacobian `H(x)`, and synthetic
//! measurement generation `z = h(x) + e`.
//!
//! Bus references are 1-based bus ids and branch references are 1-based
//! positions in the network's branch list, matching the case files.
//!
//! Noise is drawn from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with the
//! campaign seed, with the measurement's position selecting the ChaCha
//! stream. Each measurement therefore owns an independent stream: adding or
//! removing a measurement never perturbs the others' draws, and parallel
//! generation is bit-identical to sequential.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{AdmittanceMatrix, Branch, Network};
use crate::par::{self, Execution};
use crate::power_flow::{bus_injection, injection_partials, StateVector};

pub const DEFAULT_SIGMA_V: f64 = 0.004;
pub const DEFAULT_SIGMA_INJ: f64 = 0.01;
pub const DEFAULT_SIGMA_FLOW: f64 = 0.008;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasurementError {
    #[error("measurement {index}: bus {bus} does not exist")]
    UnknownBus { index: usize, bus: usize },
    #[error("measurement {index}: branch {branch} does not exist")]
    UnknownBranch { index: usize, branch: usize },
    #[error("measurement {index}: sigma must be positive and finite, got {sigma}")]
    InvalidSigma { index: usize, sigma: f64 },
    #[error("{m} measurements cannot determine {n} state variables")]
    TooFewMeasurements { m: usize, n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchEnd {
    From,
    To,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MeasurementKind {
    VoltageMagnitude { bus: usize },
    ActiveInjection { bus: usize },
    ReactiveInjection { bus: usize },
    ActiveFlow { branch: usize, end: BranchEnd },
    ReactiveFlow { branch: usize, end: BranchEnd },
}

impl MeasurementKind {
    pub fn tag(&self) -> &'static str {
        match self {
            MeasurementKind::VoltageMagnitude { .. } => "v",
            MeasurementKind::ActiveInjection { .. } => "p_inj",
            MeasurementKind::ReactiveInjection { .. } => "q_inj",
            MeasurementKind::ActiveFlow { .. } => "p_flow",
            MeasurementKind::ReactiveFlow { .. } => "q_flow",
        }
    }

    /// Bus id or branch number.
    pub fn location(&self) -> usize {
        match *self {
            MeasurementKind::VoltageMagnitude { bus }
            | MeasurementKind::ActiveInjection { bus }
            | MeasurementKind::ReactiveInjection { bus } => bus,
            MeasurementKind::ActiveFlow { branch, .. }
            | MeasurementKind::ReactiveFlow { branch, .. } => branch,
        }
    }

    pub fn end(&self) -> Option<BranchEnd> {
        match *self {
            MeasurementKind::ActiveFlow { end, .. } | MeasurementKind::ReactiveFlow { end, .. } => {
                Some(end)
            }
            _ => None,
        }
    }

    /// Inverse of (`tag`, `location`, `end`).
    pub fn from_parts(tag: &str, location: usize, end: Option<BranchEnd>) -> Option<Self> {
        Some(match (tag, end) {
            ("v", None) => MeasurementKind::VoltageMagnitude { bus: location },
            ("p_inj", None) => MeasurementKind::ActiveInjection { bus: location },
            ("q_inj", None) => MeasurementKind::ReactiveInjection { bus: location },
            ("p_flow", Some(end)) => MeasurementKind::ActiveFlow {
                branch: location,
                end,
            },
            ("q_flow", Some(end)) => MeasurementKind::ReactiveFlow {
                branch: location,
                end,
            },
            _ => return None,
        })
    }

    fn check(&self, index: usize, network: &Network) -> Result<(), MeasurementError> {
        match *self {
            MeasurementKind::VoltageMagnitude { bus }
            | MeasurementKind::ActiveInjection { bus }
            | MeasurementKind::ReactiveInjection { bus } => {
                if bus == 0 || bus > network.bus_count() {
                    return Err(MeasurementError::UnknownBus { index, bus });
                }
            }
            MeasurementKind::ActiveFlow { branch, .. }
            | MeasurementKind::ReactiveFlow { branch, .. } => {
                if branch == 0 || branch > network.branches().len() {
                    return Err(MeasurementError::UnknownBranch { index, branch });
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for MeasurementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.end() {
            Some(BranchEnd::From) => write!(f, "{}[{}:from]", self.tag(), self.location()),
            Some(BranchEnd::To) => write!(f, "{}[{}:to]", self.tag(), self.location()),
            None => write!(f, "{}[{}]", self.tag(), self.location()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub kind: MeasurementKind,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub kind: MeasurementKind,
    /// Measured value `z_i`, pu.
    pub value: f64,
    /// Standard deviation `σ_i`, pu.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    measurements: Vec<Measurement>,
}

impl MeasurementSet {
    /// Validate references and sigmas against `network` and require at
    /// least as many measurements as state variables.
    pub fn new(measurements: Vec<Measurement>, network: &Network) -> Result<Self, MeasurementError> {
        for (index, m) in measurements.iter().enumerate() {
            m.kind.check(index, network)?;
            if !(m.sigma.is_finite() && m.sigma > 0.0) {
                return Err(MeasurementError::InvalidSigma {
                    index,
                    sigma: m.sigma,
                });
            }
        }
        let n = network.state_dim();
        if measurements.len() < n {
            return Err(MeasurementError::TooFewMeasurements {
                m: measurements.len(),
                n,
            });
        }
        Ok(MeasurementSet { measurements })
    }

    pub fn measurements(&self) -> &[Measurement] {
        &self.measurements
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn values(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.measurements.iter().map(|m| m.value))
    }

    pub fn sigmas(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.measurements.iter().map(|m| m.sigma))
    }

    pub fn kinds(&self) -> impl Iterator<Item = MeasurementKind> + '_ {
        self.measurements.iter().map(|m| m.kind)
    }
}

/// Series conductance/susceptance and shunt of a branch, oriented so that
/// `i` is the metered end.
fn oriented(branch: &Branch, end: BranchEnd) -> (usize, usize, f64, f64, f64) {
    let y = branch.series_admittance();
    let (i, j) = match end {
        BranchEnd::From => (branch.from_bus - 1, branch.to_bus - 1),
        BranchEnd::To => (branch.to_bus - 1, branch.from_bus - 1),
    };
    (i, j, y.re, y.im, branch.half_charging)
}

/// Value of a single measurement function at `state`.
pub fn measure(
    kind: &MeasurementKind,
    state: &StateVector,
    network: &Network,
    ybus: &AdmittanceMatrix,
) -> f64 {
    match *kind {
        MeasurementKind::VoltageMagnitude { bus } => state.magnitudes[bus - 1],
        MeasurementKind::ActiveInjection { bus } => bus_injection(state, ybus, bus - 1).0,
        MeasurementKind::ReactiveInjection { bus } => bus_injection(state, ybus, bus - 1).1,
        MeasurementKind::ActiveFlow { branch, end } => {
            let (i, j, g, b, _) = oriented(&network.branches()[branch - 1], end);
            let (vi, vj) = (state.magnitudes[i], state.magnitudes[j]);
            let (s, c) = (state.angles[i] - state.angles[j]).sin_cos();
            vi * vi * g - vi * vj * (g * c + b * s)
        }
        MeasurementKind::ReactiveFlow { branch, end } => {
            let (i, j, g, b, bsh) = oriented(&network.branches()[branch - 1], end);
            let (vi, vj) = (state.magnitudes[i], state.magnitudes[j]);
            let (s, c) = (state.angles[i] - state.angles[j]).sin_cos();
            -vi * vi * (b + bsh) - vi * vj * (g * s - b * c)
        }
    }
}

pub fn evaluate_h(
    set: &MeasurementSet,
    state: &StateVector,
    network: &Network,
    ybus: &AdmittanceMatrix,
) -> DVector<f64> {
    DVector::from_iterator(
        set.len(),
        set.kinds().map(|k| measure(&k, state, network, ybus)),
    )
}

/// Analytic measurement Jacobian. Columns follow the estimator ordering:
/// non-slack angles, then all magnitudes.
pub fn jacobian_h(
    set: &MeasurementSet,
    state: &StateVector,
    network: &Network,
    ybus: &AdmittanceMatrix,
) -> DMatrix<f64> {
    jacobian_for(set.kinds(), set.len(), state, network, ybus)
}

pub(crate) fn jacobian_for(
    kinds: impl Iterator<Item = MeasurementKind>,
    m: usize,
    state: &StateVector,
    network: &Network,
    ybus: &AdmittanceMatrix,
) -> DMatrix<f64> {
    let nb = network.bus_count();
    let slack = network.slack_index();
    let theta_col = |bus: usize| -> Option<usize> {
        match bus.cmp(&slack) {
            std::cmp::Ordering::Less => Some(bus),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(bus - 1),
        }
    };
    let v_col = |bus: usize| nb - 1 + bus;

    let mut h = DMatrix::zeros(m, 2 * nb - 1);
    for (row, kind) in kinds.enumerate() {
        match kind {
            MeasurementKind::VoltageMagnitude { bus } => {
                h[(row, v_col(bus - 1))] = 1.0;
            }
            MeasurementKind::ActiveInjection { bus } | MeasurementKind::ReactiveInjection { bus } => {
                let part = injection_partials(state, ybus, bus - 1);
                let (dth, dv) = match kind {
                    MeasurementKind::ActiveInjection { .. } => (&part.dp_dtheta, &part.dp_dv),
                    _ => (&part.dq_dtheta, &part.dq_dv),
                };
                for k in 0..nb {
                    if let Some(c) = theta_col(k) {
                        h[(row, c)] = dth[k];
                    }
                    h[(row, v_col(k))] = dv[k];
                }
            }
            MeasurementKind::ActiveFlow { branch, end } => {
                let (i, j, g, b, _) = oriented(&network.branches()[branch - 1], end);
                let (vi, vj) = (state.magnitudes[i], state.magnitudes[j]);
                let (s, c) = (state.angles[i] - state.angles[j]).sin_cos();
                let gs_bc = g * s - b * c;
                let gc_bs = g * c + b * s;
                if let Some(col) = theta_col(i) {
                    h[(row, col)] = vi * vj * gs_bc;
                }
                if let Some(col) = theta_col(j) {
                    h[(row, col)] = -vi * vj * gs_bc;
                }
                h[(row, v_col(i))] = 2.0 * vi * g - vj * gc_bs;
                h[(row, v_col(j))] = -vi * gc_bs;
            }
            MeasurementKind::ReactiveFlow { branch, end } => {
                let (i, j, g, b, bsh) = oriented(&network.branches()[branch - 1], end);
                let (vi, vj) = (state.magnitudes[i], state.magnitudes[j]);
                let (s, c) = (state.angles[i] - state.angles[j]).sin_cos();
                let gs_bc = g * s - b * c;
                let gc_bs = g * c + b * s;
                if let Some(col) = theta_col(i) {
                    h[(row, col)] = -vi * vj * gc_bs;
                }
                if let Some(col) = theta_col(j) {
                    h[(row, col)] = vi * vj * gc_bs;
                }
                h[(row, v_col(i))] = -2.0 * vi * (b + bsh) - vj * gs_bc;
                h[(row, v_col(j))] = -vi * gs_bc;
            }
        }
    }
    h
}

/// Every bus magnitude, every bus P and Q injection, and P and Q flow at
/// both ends of every branch, in that order.
pub fn full_measurement_plan(
    network: &Network,
    sigma_v: f64,
    sigma_inj: f64,
    sigma_flow: f64,
) -> Vec<PlanEntry> {
    let nb = network.bus_count();
    let nl = network.branches().len();
    let mut plan = Vec::with_capacity(3 * nb + 4 * nl);
    let entry = |kind, sigma| PlanEntry { kind, sigma };
    for bus in 1..=nb {
        plan.push(entry(MeasurementKind::VoltageMagnitude { bus }, sigma_v));
    }
    for bus in 1..=nb {
        plan.push(entry(MeasurementKind::ActiveInjection { bus }, sigma_inj));
        plan.push(entry(MeasurementKind::ReactiveInjection { bus }, sigma_inj));
    }
    for branch in 1..=nl {
        for end in [BranchEnd::From, BranchEnd::To] {
            plan.push(entry(MeasurementKind::ActiveFlow { branch, end }, sigma_flow));
            plan.push(entry(MeasurementKind::ReactiveFlow { branch, end }, sigma_flow));
        }
    }
    plan
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Noise {
    #[default]
    Gaussian,
    /// Values are exactly `h(truth)`.
    Off,
}

/// Deterministic noise draw for measurement `index` under `seed`.
pub fn noise_sample(seed: u64, index: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    StandardNormal.sample(&mut rng)
}

pub fn generate_measurements(
    truth: &StateVector,
    plan: &[PlanEntry],
    seed: u64,
    noise: Noise,
    network: &Network,
    ybus: &AdmittanceMatrix,
) -> Result<MeasurementSet, MeasurementError> {
    generate_measurements_with(truth, plan, seed, noise, network, ybus, Execution::default())
}

pub fn generate_measurements_with(
    truth: &StateVector,
    plan: &[PlanEntry],
    seed: u64,
    noise: Noise,
    network: &Network,
    ybus: &AdmittanceMatrix,
    exec: Execution,
) -> Result<MeasurementSet, MeasurementError> {
    for (index, e) in plan.iter().enumerate() {
        e.kind.check(index, network)?;
        if !(e.sigma.is_finite() && e.sigma > 0.0) {
            return Err(MeasurementError::InvalidSigma {
                index,
                sigma: e.sigma,
            });
        }
    }
    let measurements = par::map_indexed(exec, plan.len(), |index| {
        let e = plan[index];
        let exact = measure(&e.kind, truth, network, ybus);
        let value = match noise {
            Noise::Off => exact,
            Noise::Gaussian => exact + e.sigma * noise_sample(seed, index),
        };
        Measurement {
            kind: e.kind,
            value,
            sigma: e.sigma,
        }
    });
    MeasurementSet::new(measurements, network)
}
