//! Weighted least-squares state estimation by Gauss–Newton iteration.
//!
//! The estimator minimises
//!
//! ```text
//! J(x) = Σ (z_i − h_i(x))² / σ_i²  =  [z − h(x)]ᵀ R⁻¹ [z − h(x)]
//! ```
//!
//! Each iteration solves the normal equations `G Δx = Hᵀ R⁻¹ (z − h(x))`
//! with `G = Hᵀ R⁻¹ H`, using a Cholesky factorisation of the gain matrix.
//! An eigenvalue-based condition estimate of `G` guards against
//! unobservable measurement configurations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measurement::{evaluate_h, jacobian_h, MeasurementSet};
use crate::network::{AdmittanceMatrix, Network};
use crate::power_flow::StateVector;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 50;
/// Gain matrices with a larger condition estimate are treated as singular.
pub const DEFAULT_CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("gain matrix is singular (condition estimate {condition:e}); the state is not observable from this measurement set")]
    SingularGain { condition: f64 },
    #[error("invalid estimator settings: {0}")]
    InvalidConfig(String),
    #[error("measurement set has {m} entries, fewer than the {n} state variables")]
    TooFewMeasurements { m: usize, n: usize },
    #[error("start state has {got} buses, network has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub enum Start {
    /// `V = 1` (or setpoint at PV and slack buses), `θ = 0`.
    #[default]
    Flat,
    Warm(StateVector),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Convergence threshold on `max |Δx|`.
    pub tol: f64,
    pub max_iter: usize,
    pub start: Start,
    /// Step scale; 1 is plain Gauss–Newton.
    pub damping: f64,
    pub condition_limit: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            start: Start::Flat,
            damping: 1.0,
            condition_limit: DEFAULT_CONDITION_LIMIT,
        }
    }
}

impl EstimatorConfig {
    pub fn warm(mut self, state: StateVector) -> Self {
        self.start = Start::Warm(state);
        self
    }

    fn validate(&self) -> Result<(), EstimationError> {
        if !(self.tol > 0.0) {
            return Err(EstimationError::InvalidConfig(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(EstimationError::InvalidConfig(
                "max_iter must be at least 1".into(),
            ));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(EstimationError::InvalidConfig(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub state: StateVector,
    pub iterations: usize,
    /// `J(x̂)`
    pub objective: f64,
    /// `J` at the start state and after every step.
    pub objective_history: Vec<f64>,
    /// `z − h(x̂)`
    pub residuals: Vec<f64>,
    pub converged: bool,
    /// Condition estimate of the gain matrix at the last step.
    pub gain_condition: f64,
    /// `max |Δx|` of the last step.
    pub last_step: f64,
}

/// `[z − h(x)]ᵀ R⁻¹ [z − h(x)]` with `R = diag(σ²)`.
pub fn objective_j(
    set: &MeasurementSet,
    state: &StateVector,
    network: &Network,
    ybus: &AdmittanceMatrix,
) -> f64 {
    let h = evaluate_h(set, state, network, ybus);
    weighted_sum_squares(&(set.values() - h), &set.sigmas())
}

fn weighted_sum_squares(residual: &DVector<f64>, sigmas: &DVector<f64>) -> f64 {
    residual
        .iter()
        .zip(sigmas.iter())
        .map(|(r, s)| (r / s).powi(2))
        .sum()
}

/// `G = Hᵀ R⁻¹ H`, assembled symmetrically.
pub fn gain_matrix(h: &DMatrix<f64>, sigmas: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = h.clone();
    for (mut row, s) in scaled.row_iter_mut().zip(sigmas.iter()) {
        row /= *s;
    }
    let g = scaled.tr_mul(&scaled);
    // tr_mul is symmetric up to rounding; make it exact
    (&g + g.transpose()) * 0.5
}

/// Ratio of the extreme eigenvalues of a symmetric positive semidefinite
/// matrix; infinite when the smallest is not positive.
pub fn condition_estimate(g: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(g.clone()).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if max <= 0.0 || min <= max * f64::EPSILON {
        f64::INFINITY
    } else {
        max / min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussNewtonStep {
    pub dx: DVector<f64>,
    pub gain: DMatrix<f64>,
    pub condition: f64,
}

/// One Gauss–Newton step from `state`.
pub fn gn_step(
    state: &StateVector,
    set: &MeasurementSet,
    network: &Network,
    ybus: &AdmittanceMatrix,
) -> Result<GaussNewtonStep, EstimationError> {
    gn_step_limited(state, set, network, ybus, DEFAULT_CONDITION_LIMIT)
}

fn gn_step_limited(
    state: &StateVector,
    set: &MeasurementSet,
    network: &Network,
    ybus: &AdmittanceMatrix,
    condition_limit: f64,
) -> Result<GaussNewtonStep, EstimationError> {
    let h = jacobian_h(set, state, network, ybus);
    let sigmas = set.sigmas();
    let residual = set.values() - evaluate_h(set, state, network, ybus);
    solve_normal_equations(&h, &sigmas, &residual, condition_limit)
}

/// Solve `(Hᵀ R⁻¹ H) Δx = Hᵀ R⁻¹ r` by Cholesky.
pub fn solve_normal_equations(
    h: &DMatrix<f64>,
    sigmas: &DVector<f64>,
    residual: &DVector<f64>,
    condition_limit: f64,
) -> Result<GaussNewtonStep, EstimationError> {
    let gain = gain_matrix(h, sigmas);
    let condition = condition_estimate(&gain);
    if !(condition <= condition_limit) {
        return Err(EstimationError::SingularGain { condition });
    }
    let weighted = residual.component_div(&sigmas.map(|s| s * s));
    let rhs = h.tr_mul(&weighted);
    let chol = gain
        .clone()
        .cholesky()
        .ok_or(EstimationError::SingularGain { condition })?;
    let dx = chol.solve(&rhs);
    Ok(GaussNewtonStep {
        dx,
        gain,
        condition,
    })
}

pub fn estimate(
    network: &Network,
    ybus: &AdmittanceMatrix,
    set: &MeasurementSet,
    config: &EstimatorConfig,
) -> Result<EstimationResult, EstimationError> {
    config.validate()?;
    let n = network.state_dim();
    if set.len() < n {
        return Err(EstimationError::TooFewMeasurements { m: set.len(), n });
    }
    let slack = network.slack_index();
    let start = match &config.start {
        Start::Flat => StateVector::flat(network),
        Start::Warm(s) if s.len() != network.bus_count() => {
            return Err(EstimationError::DimensionMismatch {
                expected: network.bus_count(),
                got: s.len(),
            })
        }
        Start::Warm(s) => s.clone(),
    };
    let mut x = start.to_vector(slack);
    let mut state = StateVector::from_vector(&x, slack);

    let mut history = vec![objective_j(set, &state, network, ybus)];
    let mut iterations = 0;
    let mut converged = false;
    let mut condition = f64::NAN;
    let mut last_step = f64::INFINITY;
    while iterations < config.max_iter {
        iterations += 1;
        let step = gn_step_limited(&state, set, network, ybus, config.condition_limit)?;
        condition = step.condition;
        let dx = step.dx * config.damping;
        last_step = dx.amax();
        x += &dx;
        state = StateVector::from_vector(&x, slack);
        history.push(objective_j(set, &state, network, ybus));
        if last_step < config.tol {
            converged = true;
            break;
        }
    }

    let residuals = (set.values() - evaluate_h(set, &state, network, ybus))
        .iter()
        .copied()
        .collect();
    Ok(EstimationResult {
        objective: *history.last().expect("history starts non-empty"),
        state,
        iterations,
        objective_history: history,
        residuals,
        converged,
        gain_condition: condition,
        last_step,
    })
}
