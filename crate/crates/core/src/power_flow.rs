//! Polar-coordinate Newton–Raphson AC power flow.
//!
//! The solved operating point serves as ground truth for synthetic
//! measurements and as the reference the estimator is scored against.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{AdmittanceMatrix, BusKind, Network};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("power-flow Jacobian is singular at iteration {0}")]
    SingularJacobian(usize),
    #[error("invalid power-flow settings: {0}")]
    InvalidSettings(String),
    #[error("initial state has {got} buses, network has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Bus voltage angles (rad) and magnitudes (pu), indexed by bus position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub angles: Vec<f64>,
    pub magnitudes: Vec<f64>,
}

impl StateVector {
    /// `V = 1` at PQ buses, `V = v_setpoint` at PV and slack buses, all
    /// angles zero.
    pub fn flat(network: &Network) -> Self {
        let magnitudes = network
            .buses()
            .iter()
            .map(|b| match b.kind {
                BusKind::PQ => 1.0,
                BusKind::PV | BusKind::Slack => b.v_setpoint,
            })
            .collect();
        StateVector {
            angles: vec![0.0; network.bus_count()],
            magnitudes,
        }
    }

    pub fn len(&self) -> usize {
        self.magnitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.magnitudes.is_empty()
    }

    /// Estimator ordering: non-slack angles in bus order, then every
    /// magnitude.
    pub fn to_vector(&self, slack: usize) -> DVector<f64> {
        let n = self.len();
        let mut x = DVector::zeros(2 * n - 1);
        let mut k = 0;
        for (i, &a) in self.angles.iter().enumerate() {
            if i != slack {
                x[k] = a;
                k += 1;
            }
        }
        for (i, &v) in self.magnitudes.iter().enumerate() {
            x[n - 1 + i] = v;
        }
        x
    }

    /// Inverse of [`to_vector`](Self::to_vector); the slack angle is set
    /// to exactly zero.
    pub fn from_vector(x: &DVector<f64>, slack: usize) -> Self {
        let n = x.len().div_ceil(2);
        let mut angles = vec![0.0; n];
        let mut k = 0;
        for (i, a) in angles.iter_mut().enumerate() {
            if i != slack {
                *a = x[k];
                k += 1;
            }
        }
        let magnitudes = (0..n).map(|i| x[n - 1 + i]).collect();
        StateVector { angles, magnitudes }
    }

    /// Largest coordinate-wise gap `(max |dθ|, max |dV|)`.
    pub fn max_abs_diff(&self, other: &StateVector) -> (f64, f64) {
        let da = self
            .angles
            .iter()
            .zip(&other.angles)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let dv = self
            .magnitudes
            .iter()
            .zip(&other.magnitudes)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        (da, dv)
    }
}

/// Per-bus active and reactive injections computed from bus voltages.
///
/// `P_i = V_i Σ_j V_j (G_ij cos θ_ij + B_ij sin θ_ij)`,
/// `Q_i = V_i Σ_j V_j (G_ij sin θ_ij − B_ij cos θ_ij)`.
pub fn calc_injections(state: &StateVector, ybus: &AdmittanceMatrix) -> Vec<(f64, f64)> {
    let n = ybus.dim();
    (0..n).map(|i| bus_injection(state, ybus, i)).collect()
}

pub(crate) fn bus_injection(state: &StateVector, ybus: &AdmittanceMatrix, i: usize) -> (f64, f64) {
    let n = ybus.dim();
    let vi = state.magnitudes[i];
    let (mut p, mut q) = (0.0, 0.0);
    for j in 0..n {
        let y = ybus.get(i, j);
        if y.re == 0.0 && y.im == 0.0 {
            continue;
        }
        let (s, c) = (state.angles[i] - state.angles[j]).sin_cos();
        let vj = state.magnitudes[j];
        p += vj * (y.re * c + y.im * s);
        q += vj * (y.re * s - y.im * c);
    }
    (vi * p, vi * q)
}

/// Partial derivatives of one bus injection with respect to every bus
/// angle and magnitude.
pub(crate) struct InjectionPartials {
    pub dp_dtheta: Vec<f64>,
    pub dp_dv: Vec<f64>,
    pub dq_dtheta: Vec<f64>,
    pub dq_dv: Vec<f64>,
}

pub(crate) fn injection_partials(
    state: &StateVector,
    ybus: &AdmittanceMatrix,
    i: usize,
) -> InjectionPartials {
    let n = ybus.dim();
    let mut out = InjectionPartials {
        dp_dtheta: vec![0.0; n],
        dp_dv: vec![0.0; n],
        dq_dtheta: vec![0.0; n],
        dq_dv: vec![0.0; n],
    };
    let vi = state.magnitudes[i];
    let (pi, qi) = bus_injection(state, ybus, i);
    let yii = ybus.get(i, i);
    for j in 0..n {
        if j == i {
            continue;
        }
        let y = ybus.get(i, j);
        if y.re == 0.0 && y.im == 0.0 {
            continue;
        }
        let (s, c) = (state.angles[i] - state.angles[j]).sin_cos();
        let vj = state.magnitudes[j];
        let gs_bc = y.re * s - y.im * c;
        let gc_bs = y.re * c + y.im * s;
        out.dp_dtheta[j] = vi * vj * gs_bc;
        out.dp_dv[j] = vi * gc_bs;
        out.dq_dtheta[j] = -vi * vj * gc_bs;
        out.dq_dv[j] = vi * gs_bc;
    }
    out.dp_dtheta[i] = -qi - yii.im * vi * vi;
    out.dp_dv[i] = pi / vi + yii.re * vi;
    out.dq_dtheta[i] = pi - yii.re * vi * vi;
    out.dq_dv[i] = qi / vi - yii.im * vi;
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowResult {
    pub state: StateVector,
    pub iterations: usize,
    /// Infinity norm of the final mismatch vector, pu.
    pub max_mismatch: f64,
    pub converged: bool,
}

/// Which buses contribute which unknowns and equations.
struct Layout {
    /// Buses whose angle is unknown (every non-slack bus).
    theta: Vec<usize>,
    /// Buses whose magnitude is unknown (PQ buses).
    vmag: Vec<usize>,
}

impl Layout {
    fn new(network: &Network) -> Self {
        let mut theta = Vec::new();
        let mut vmag = Vec::new();
        for (k, b) in network.buses().iter().enumerate() {
            match b.kind {
                BusKind::Slack => {}
                BusKind::PV => theta.push(k),
                BusKind::PQ => {
                    theta.push(k);
                    vmag.push(k);
                }
            }
        }
        Layout { theta, vmag }
    }

    fn dim(&self) -> usize {
        self.theta.len() + self.vmag.len()
    }
}

fn mismatch(
    state: &StateVector,
    ybus: &AdmittanceMatrix,
    spec: &[(f64, f64)],
    layout: &Layout,
) -> DVector<f64> {
    let calc = calc_injections(state, ybus);
    let mut m = DVector::zeros(layout.dim());
    for (r, &k) in layout.theta.iter().enumerate() {
        m[r] = spec[k].0 - calc[k].0;
    }
    let off = layout.theta.len();
    for (r, &k) in layout.vmag.iter().enumerate() {
        m[off + r] = spec[k].1 - calc[k].1;
    }
    m
}

/// Reduced Newton–Raphson Jacobian: rows are P at non-slack buses then Q at
/// PQ buses; columns are θ at non-slack buses then V at PQ buses.
fn reduced_jacobian(state: &StateVector, ybus: &AdmittanceMatrix, layout: &Layout) -> DMatrix<f64> {
    let d = layout.dim();
    let off = layout.theta.len();
    let mut jac = DMatrix::zeros(d, d);
    let mut fill = |row: usize, dtheta: &[f64], dv: &[f64]| {
        for (c, &k) in layout.theta.iter().enumerate() {
            jac[(row, c)] = dtheta[k];
        }
        for (c, &k) in layout.vmag.iter().enumerate() {
            jac[(row, off + c)] = dv[k];
        }
    };
    for (r, &i) in layout.theta.iter().enumerate() {
        let part = injection_partials(state, ybus, i);
        fill(r, &part.dp_dtheta, &part.dp_dv);
    }
    for (r, &i) in layout.vmag.iter().enumerate() {
        let part = injection_partials(state, ybus, i);
        fill(off + r, &part.dq_dtheta, &part.dq_dv);
    }
    jac
}

/// Newton–Raphson power flow.
///
/// Slack and PV magnitudes are pinned to their setpoints and the slack
/// angle to zero regardless of `initial`. Running out of iterations is not
/// an error: the last iterate is returned with `converged == false`.
pub fn solve_power_flow(
    network: &Network,
    ybus: &AdmittanceMatrix,
    tol: f64,
    max_iter: usize,
    initial: Option<&StateVector>,
) -> Result<PowerFlowResult, PowerFlowError> {
    if !(tol > 0.0) {
        return Err(PowerFlowError::InvalidSettings(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    if max_iter == 0 {
        return Err(PowerFlowError::InvalidSettings(
            "max_iter must be at least 1".into(),
        ));
    }
    let n = network.bus_count();
    let mut state = match initial {
        Some(s) if s.len() != n => {
            return Err(PowerFlowError::DimensionMismatch {
                expected: n,
                got: s.len(),
            })
        }
        Some(s) => s.clone(),
        None => StateVector::flat(network),
    };
    for (k, b) in network.buses().iter().enumerate() {
        match b.kind {
            BusKind::Slack => {
                state.angles[k] = 0.0;
                state.magnitudes[k] = b.v_setpoint;
            }
            BusKind::PV => state.magnitudes[k] = b.v_setpoint,
            BusKind::PQ => {}
        }
    }

    let layout = Layout::new(network);
    let spec = network.injections_pu();
    let off = layout.theta.len();

    let mut mis = mismatch(&state, ybus, &spec, &layout);
    let mut norm = mis.amax();
    let mut iterations = 0;
    while norm >= tol && iterations < max_iter {
        iterations += 1;
        let jac = reduced_jacobian(&state, ybus, &layout);
        let dx = jac
            .lu()
            .solve(&mis)
            .ok_or(PowerFlowError::SingularJacobian(iterations))?;
        for (c, &k) in layout.theta.iter().enumerate() {
            state.angles[k] += dx[c];
        }
        for (c, &k) in layout.vmag.iter().enumerate() {
            state.magnitudes[k] += dx[off + c];
        }
        mis = mismatch(&state, ybus, &spec, &layout);
        norm = mis.amax();
    }
    // an already-balanced start still counts as one pass over the equations
    let iterations = iterations.max(1);

    Ok(PowerFlowResult {
        state,
        iterations,
        max_mismatch: norm,
        converged: norm < tol,
    })
}

/// Total series resistive loss `Σ |I|² r` over all branches, pu.
pub fn branch_losses(network: &Network, state: &StateVector) -> f64 {
    network
        .branches()
        .iter()
        .map(|br| {
            let (f, t) = (br.from_bus - 1, br.to_bus - 1);
            let vf = num_complex::Complex64::from_polar(state.magnitudes[f], state.angles[f]);
            let vt = num_complex::Complex64::from_polar(state.magnitudes[t], state.angles[t]);
            let i = (vf - vt) * br.series_admittance();
            i.norm_sqr() * br.resistance
        })
        .sum()
}
