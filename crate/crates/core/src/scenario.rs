//! Multi-snapshot estimation with one-snapshot memory.
//!
//! Snapshot `k` scales every load by `load_scale[k]`, solves the power
//! flow for the truth, synthesises measurements with seed
//! `derive_seed(seed, k)` and estimates. The first snapshot starts flat;
//! every later one is warm-started from the previous snapshot's estimate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::campaign::derive_seed;
use crate::case::CaseBundle;
use crate::measurement::{
    full_measurement_plan, generate_measurements, Noise, DEFAULT_SIGMA_FLOW, DEFAULT_SIGMA_INJ,
    DEFAULT_SIGMA_V,
};
use crate::network::build_ybus;
use crate::power_flow::{self, solve_power_flow, StateVector};
use crate::wls::{estimate, EstimatorConfig, Start};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("invalid snapshot plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sigmas {
    pub v: f64,
    pub inj: f64,
    pub flow: f64,
}

impl Default for Sigmas {
    fn default() -> Self {
        Sigmas {
            v: DEFAULT_SIGMA_V,
            inj: DEFAULT_SIGMA_INJ,
            flow: DEFAULT_SIGMA_FLOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotPlan {
    /// One multiplier per snapshot, applied to every bus load.
    pub load_scale: Vec<f64>,
    pub seed: u64,
    pub sigmas: Sigmas,
    pub noise: Noise,
    /// Tolerances for the estimator. The start field is ignored; snapshot
    /// memory decides the start.
    pub estimator: EstimatorConfig,
    pub pf_tol: f64,
    pub pf_max_iter: usize,
    /// Also estimate every warm-started snapshot from a flat start and
    /// record its iteration count.
    pub compare_flat_start: bool,
}

impl SnapshotPlan {
    pub fn new(load_scale: Vec<f64>, seed: u64) -> Self {
        SnapshotPlan {
            load_scale,
            seed,
            sigmas: Sigmas::default(),
            noise: Noise::Gaussian,
            estimator: EstimatorConfig::default(),
            pf_tol: power_flow::DEFAULT_TOL,
            pf_max_iter: power_flow::DEFAULT_MAX_ITER,
            compare_flat_start: false,
        }
    }

    pub fn snapshot_count(&self) -> usize {
        self.load_scale.len()
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        if self.load_scale.is_empty() {
            return Err(ScenarioError::InvalidPlan("need at least one snapshot".into()));
        }
        if let Some(s) = self.load_scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(ScenarioError::InvalidPlan(format!(
                "load scale must be positive, got {s}"
            )));
        }
        let Sigmas { v, inj, flow } = self.sigmas;
        if ![v, inj, flow].iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(ScenarioError::InvalidPlan("sigmas must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartKind {
    Flat,
    Warm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub index: usize,
    pub load_scale: f64,
    pub seed: u64,
    pub start: StartKind,
    pub truth: Option<StateVector>,
    pub estimate: Option<StateVector>,
    pub iterations: usize,
    pub objective: Option<f64>,
    pub converged: bool,
    pub flat_start_iterations: Option<usize>,
    /// Set when the snapshot could not be completed.
    pub error: Option<String>,
}

impl SnapshotRecord {
    pub fn succeeded(&self) -> bool {
        self.error.is_none() && self.converged
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotReport {
    pub snapshots: Vec<SnapshotRecord>,
}

impl SnapshotReport {
    pub fn all_succeeded(&self) -> bool {
        self.snapshots.iter().all(SnapshotRecord::succeeded)
    }
}

pub fn run_snapshots(bundle: &CaseBundle, plan: &SnapshotPlan) -> Result<SnapshotReport, ScenarioError> {
    plan.validate()?;
    let ybus = build_ybus(&bundle.network)?;
    let mut previous: Option<StateVector> = None;
    let mut snapshots = Vec::with_capacity(plan.snapshot_count());

    for (index, &scale) in plan.load_scale.iter().enumerate() {
        let seed = derive_seed(plan.seed, index as u64);
        let network = bundle
            .network
            .with_load_scale(|bus| scale * bundle.bus_load_scale[bus]);
        let start_kind = if previous.is_some() { StartKind::Warm } else { StartKind::Flat };
        let mut record = SnapshotRecord {
            index,
            load_scale: scale,
            seed,
            start: start_kind,
            truth: None,
            estimate: None,
            iterations: 0,
            objective: None,
            converged: false,
            flat_start_iterations: None,
            error: None,
        };

        let truth = match solve_power_flow(&network, &ybus, plan.pf_tol, plan.pf_max_iter, None) {
            Ok(pf) if pf.converged => pf.state,
            Ok(pf) => {
                record.error = Some(format!(
                    "power flow did not converge in {} iterations (mismatch {:e})",
                    pf.iterations, pf.max_mismatch
                ));
                snapshots.push(record);
                previous = None;
                continue;
            }
            Err(e) => {
                record.error = Some(e.to_string());
                snapshots.push(record);
                previous = None;
                continue;
            }
        };
        record.truth = Some(truth.clone());

        let entries = full_measurement_plan(&network, plan.sigmas.v, plan.sigmas.inj, plan.sigmas.flow);
        let set = match generate_measurements(&truth, &entries, seed, plan.noise, &network, &ybus) {
            Ok(set) => set,
            Err(e) => {
                record.error = Some(e.to_string());
                snapshots.push(record);
                previous = None;
                continue;
            }
        };

        let mut config = plan.estimator.clone();
        config.start = match previous.take() {
            Some(prev) => Start::Warm(prev),
            None => Start::Flat,
        };
        match estimate(&network, &ybus, &set, &config) {
            Ok(res) => {
                record.iterations = res.iterations;
                record.objective = Some(res.objective);
                record.converged = res.converged;
                if !res.converged {
                    record.error = Some(format!(
                        "estimator did not converge in {} iterations",
                        res.iterations
                    ));
                } else {
                    previous = Some(res.state.clone());
                }
                record.estimate = Some(res.state);
            }
            Err(e) => record.error = Some(e.to_string()),
        }

        if plan.compare_flat_start && start_kind == StartKind::Warm {
            let flat = EstimatorConfig {
                start: Start::Flat,
                ..plan.estimator.clone()
            };
            if let Ok(res) = estimate(&network, &ybus, &set, &flat) {
                record.flat_start_iterations = Some(res.iterations);
            }
        }
        snapshots.push(record);
    }
    Ok(SnapshotReport { snapshots })
}
