//! Binary switch-state controller for a discrete linear system.
//!
//! The plant is `x_{k+1} = A x_k + b u_k` with `u_k ∈ {0, 1}`. Each step
//! costs `q(x) = (x − r)ᵀ Q (x − r)` plus `β` whenever the switch changes
//! position, discounted by `α`. The Bellman equation over the previous
//! switch position `z` is
//!
//! ```text
//! V_0(x) = q(x) + min{ α V_0(Ax),      β + α V_1(Ax + b) }
//! V_1(x) = q(x) + min{ β + α V_0(Ax),  α V_1(Ax + b)     }
//! ```
//!
//! Both value functions are approximated by one shared quadratic
//! `V(x) = (x − θ)ᵀ P (x − θ) + v`, which makes the switching function
//! `f(x) = V(Ax + b) − V(Ax)` affine. The resulting policy is a hysteresis
//! rule: leave the switch where it is unless `α f(x)` crosses `∓β`.
//!
//! [`bellman_value_iteration`] tabulates `V_0`, `V_1` on a grid for one- and
//! two-dimensional systems as an independent check of the quadratic.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Execution};

/// Convergence threshold on `‖ΔP‖_∞` for the value-matrix iteration.
pub const P_TOL: f64 = 1e-12;
/// Required `‖P − Q − αAᵀPA‖_∞` of an accepted solution.
pub const P_RESIDUAL_LIMIT: f64 = 1e-10;
/// Allowed deviation of `f` from its affine fit.
pub const AFFINITY_TOL: f64 = 1e-9;
const P_MAX_ITER: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("invalid system: {0}")]
    InvalidSystem(String),
    #[error("α·ρ(A)² = {0} is not below 1; the discounted value is unbounded")]
    UnstableSystem(f64),
    #[error("value matrix P is singular (condition estimate {0:e})")]
    SingularP(f64),
    #[error("value-matrix iteration stalled at ‖ΔP‖ = {0:e}")]
    FixedPointNotConverged(f64),
    #[error("switching function is not affine: residual {0:e}")]
    NonAffineResidual(f64),
    #[error("value iteration did not reach tolerance after {sweeps} sweeps (residual {residual:e})")]
    MaxSweepsExceeded { sweeps: usize, residual: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("expected a vector of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Switch position. `Off` is `u = 0`, `On` is `u = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Switch {
    Off,
    On,
}

impl Switch {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Switch::Off),
            1 => Some(Switch::On),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Switch::Off => 0,
            Switch::On => 1,
        }
    }
}

impl Serialize for Switch {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Switch {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Switch::from_u8(v).ok_or_else(|| serde::de::Error::custom("switch state must be 0 or 1"))
    }
}

/// Scalar output `y = h·x`, reported alongside simulated trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarOutput {
    pub h_row: DVector<f64>,
}

impl ScalarOutput {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.h_row.dot(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchedSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub q: DMatrix<f64>,
    pub r: DVector<f64>,
    pub output: Option<ScalarOutput>,
}

impl SwitchedSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DVector<f64>,
        alpha: f64,
        beta: f64,
        q: DMatrix<f64>,
        r: DVector<f64>,
    ) -> Result<Self, ControllerError> {
        let n = a.nrows();
        let bad = |msg: String| Err(ControllerError::InvalidSystem(msg));
        if n == 0 || a.ncols() != n {
            return bad(format!("A must be square and non-empty, got {}x{}", a.nrows(), a.ncols()));
        }
        if b.len() != n || r.len() != n || q.nrows() != n || q.ncols() != n {
            return bad(format!("b, r and Q must match the state dimension {n}"));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {alpha}"));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return bad(format!("beta must be non-negative, got {beta}"));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !finite(&a) || !finite(&q) || !b.iter().chain(r.iter()).all(|v| v.is_finite()) {
            return bad("entries must be finite".into());
        }
        let scale = q.amax().max(1.0);
        if (&q - q.transpose()).amax() > 1e-12 * scale {
            return bad("Q must be symmetric".into());
        }
        let min_eig = SymmetricEigen::new(q.clone()).eigenvalues.min();
        if min_eig < -1e-12 * scale {
            return bad(format!("Q must be positive semidefinite (eigenvalue {min_eig})"));
        }
        Ok(SwitchedSystem {
            a,
            b,
            alpha,
            beta,
            q,
            r,
            output: None,
        })
    }

    pub fn with_output(mut self, h_row: DVector<f64>) -> Result<Self, ControllerError> {
        if h_row.len() != self.dim() {
            return Err(ControllerError::DimensionMismatch {
                expected: self.dim(),
                got: h_row.len(),
            });
        }
        self.output = Some(ScalarOutput { h_row });
        Ok(self)
    }

    /// One-dimensional reference system: `A = 0.9`, `b = 0.1`, `α = 0.95`,
    /// `β = 0.05`, `Q = 1`, `r = 0.5`. With the switch off the state decays
    /// to 0, with it on it rises to 1, so holding `r` requires switching.
    pub fn scalar_example() -> Self {
        SwitchedSystem::new(
            DMatrix::from_element(1, 1, 0.9),
            DVector::from_element(1, 0.1),
            0.95,
            0.05,
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.5),
        )
        .expect("scalar example is valid")
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// `A x + b u`
    pub fn step(&self, x: &DVector<f64>, u: Switch) -> DVector<f64> {
        let ax = &self.a * x;
        match u {
            Switch::Off => ax,
            Switch::On => ax + &self.b,
        }
    }

    /// `q(x) = (x − r)ᵀ Q (x − r)`
    pub fn state_cost(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.r;
        d.dot(&(&self.q * &d))
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<(), ControllerError> {
        if x.len() != self.dim() {
            return Err(ControllerError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// `q(x) + β·[u ≠ z]`
pub fn stage_cost(x: &DVector<f64>, z: Switch, u: Switch, system: &SwitchedSystem) -> f64 {
    let switching = if u != z { system.beta } else { 0.0 };
    system.state_cost(x) + switching
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityAdvisory {
    pub spectral_radius: f64,
    /// `ρ(A) < 1`
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discretized {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub advisory: StabilityAdvisory,
}

/// Forward-Euler discretisation: `A = I + a·dt`, `b_d = b·dt`.
pub fn discretize(a: &DMatrix<f64>, b: &DVector<f64>, dt: f64) -> Result<Discretized, ControllerError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(ControllerError::InvalidSystem(format!("dt must be positive, got {dt}")));
    }
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(ControllerError::InvalidSystem(
            "continuous a must be square and match b".into(),
        ));
    }
    let ad = DMatrix::identity(n, n) + a * dt;
    let rho = spectral_radius(&ad);
    Ok(Discretized {
        a: ad,
        b: b * dt,
        advisory: StabilityAdvisory {
            spectral_radius: rho,
            stable: rho < 1.0,
        },
    })
}

/// Shared quadratic value `V(x) = (x − θ)ᵀ P (x − θ) + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticValue {
    pub p: DMatrix<f64>,
    pub theta: DVector<f64>,
    pub v: f64,
    /// Sweeps of the `P` iteration.
    pub iterations: usize,
}

impl QuadraticValue {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.theta;
        d.dot(&(&self.p * &d)) + self.v
    }

    /// `‖P − Q − αAᵀPA‖_∞` against `system`.
    pub fn fixed_point_residual(&self, system: &SwitchedSystem) -> f64 {
        let lhs = &self.q_step(system) - &self.p;
        inf_norm(&lhs)
    }

    fn q_step(&self, system: &SwitchedSystem) -> DMatrix<f64> {
        lyapunov_step(system, &self.p)
    }
}

fn lyapunov_step(system: &SwitchedSystem, p: &DMatrix<f64>) -> DMatrix<f64> {
    let next = &system.q + (system.a.transpose() * p * &system.a) * system.alpha;
    (&next + next.transpose()) * 0.5
}

/// Matrix infinity norm (largest absolute row sum).
fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Solve for the shared quadratic value.
///
/// `P` comes from iterating `P ← Q + αAᵀPA` from `P = Q`; the iteration is
/// continued past `‖ΔP‖_∞ < 1e-12` until the update stops shrinking, so the
/// returned `P` sits at the floating-point fixed point. Then
///
/// ```text
/// θ = P⁻¹ (I − αAᵀ)⁻¹ (Q r − ½ α Aᵀ P b)
/// v = (rᵀQr + ½β + (α − 1) θᵀPθ + ½ α bᵀPb − α bᵀPθ) / (1 − α)
/// ```
pub fn solve_quadratic_value(system: &SwitchedSystem) -> Result<QuadraticValue, ControllerError> {
    let alpha = system.alpha;
    let rho = spectral_radius(&system.a);
    let growth = alpha * rho * rho;
    if !(growth < 1.0) {
        return Err(ControllerError::UnstableSystem(growth));
    }

    let mut p = system.q.clone();
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    loop {
        iterations += 1;
        let next = lyapunov_step(system, &p);
        let delta = inf_norm(&(&next - &p));
        p = next;
        if delta == 0.0 || (delta < P_TOL && delta >= prev) {
            break;
        }
        if iterations >= P_MAX_ITER {
            if delta < P_TOL {
                break;
            }
            return Err(ControllerError::FixedPointNotConverged(delta));
        }
        prev = delta;
    }

    let eig = SymmetricEigen::new(p.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if hi <= 0.0 || lo <= hi * 1e-12 {
        let cond = if hi <= 0.0 || lo <= 0.0 { f64::INFINITY } else { hi / lo };
        return Err(ControllerError::SingularP(cond));
    }

    let n = system.dim();
    let at = system.a.transpose();
    let pb = &p * &system.b;
    let rhs = &system.q * &system.r - (&at * &pb) * (0.5 * alpha);
    let lhs = DMatrix::identity(n, n) - &at * alpha;
    let w = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| ControllerError::InvalidSystem("I − αAᵀ is singular".into()))?;
    let theta = p
        .clone()
        .cholesky()
        .ok_or(ControllerError::SingularP(hi / lo))?
        .solve(&w);

    let p_theta = &p * &theta;
    let v = (system.r.dot(&(&system.q * &system.r)) + 0.5 * system.beta
        + (alpha - 1.0) * theta.dot(&p_theta)
        + 0.5 * alpha * system.b.dot(&pb)
        - alpha * system.b.dot(&p_theta))
        / (1.0 - alpha);

    let qv = QuadraticValue {
        p,
        theta,
        v,
        iterations,
    };
    let residual = qv.fixed_point_residual(system);
    if !(residual < P_RESIDUAL_LIMIT) {
        return Err(ControllerError::FixedPointNotConverged(residual));
    }
    Ok(qv)
}

/// Affine switching function `f(x) = δ·x + ζ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingFunction {
    pub delta: DVector<f64>,
    pub zeta: f64,
}

impl SwitchingFunction {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.delta.dot(x) + self.zeta
    }
}

/// `V(Ax + b) − V(Ax)` evaluated directly from the quadratic. The shared
/// offset `v` cancels and is left out.
pub fn switching_value_direct(system: &SwitchedSystem, qv: &QuadraticValue, x: &DVector<f64>) -> f64 {
    let form = |y: DVector<f64>| {
        let d = y - &qv.theta;
        d.dot(&(&qv.p * &d))
    };
    form(system.step(x, Switch::On)) - form(system.step(x, Switch::Off))
}

/// Three ways of writing the affine coefficients of `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingComparison {
    /// Recovered by interpolating direct evaluations.
    pub fitted: SwitchingFunction,
    /// Algebraic expansion of the shared quadratic:
    /// `δ = 2AᵀPb`, `ζ = bᵀPb − 2bᵀPθ`.
    pub expanded: SwitchingFunction,
    /// Alternative closed form `δ = −2AᵀPθ`, `ζ = θᵀPθ − 2bᵀPθ`.
    /// Reported for comparison, never used for control.
    pub alternate: SwitchingFunction,
    /// Largest `|f_direct − f_fitted|` over the affinity check points.
    pub affinity_residual: f64,
    /// `max(‖δ_fit − δ_exp‖_∞, |ζ_fit − ζ_exp|)`
    pub fitted_vs_expanded: f64,
    /// `max(‖δ_fit − δ_alternate‖_∞, |ζ_fit − ζ_alternate|)`
    pub fitted_vs_alternate: f64,
}

fn coeff_gap(a: &SwitchingFunction, b: &SwitchingFunction) -> f64 {
    (&a.delta - &b.delta).amax().max((a.zeta - b.zeta).abs())
}

/// Recover `δ, ζ` from direct evaluations of `f` at `0, e_1, …, e_n`, then
/// check affinity at `n + 10` pseudo-random points.
pub fn switching_function(
    system: &SwitchedSystem,
    qv: &QuadraticValue,
) -> Result<SwitchingComparison, ControllerError> {
    let n = system.dim();
    let zeta = switching_value_direct(system, qv, &DVector::zeros(n));
    let delta = DVector::from_fn(n, |k, _| {
        let mut e = DVector::zeros(n);
        e[k] = 1.0;
        switching_value_direct(system, qv, &e) - zeta
    });
    let fitted = SwitchingFunction { delta, zeta };

    let mut rng = ChaCha8Rng::seed_from_u64(0x5157_4348);
    let scale = 1.0 + qv.theta.amax() + system.r.amax();
    let mut affinity_residual: f64 = 0.0;
    for _ in 0..n + 10 {
        let x = DVector::from_fn(n, |_, _| rng.random_range(-scale..scale));
        let direct = switching_value_direct(system, qv, &x);
        let gap = (direct - fitted.eval(&x)).abs() / direct.abs().max(1.0);
        affinity_residual = affinity_residual.max(gap);
    }
    if !(affinity_residual < AFFINITY_TOL) {
        return Err(ControllerError::NonAffineResidual(affinity_residual));
    }

    let at = system.a.transpose();
    let pb = &qv.p * &system.b;
    let p_theta = &qv.p * &qv.theta;
    let expanded = SwitchingFunction {
        delta: (&at * &pb) * 2.0,
        zeta: system.b.dot(&pb) - 2.0 * pb.dot(&qv.theta),
    };
    let alternate = SwitchingFunction {
        delta: (&at * &p_theta) * -2.0,
        zeta: qv.theta.dot(&p_theta) - 2.0 * system.b.dot(&p_theta),
    };
    Ok(SwitchingComparison {
        fitted_vs_expanded: coeff_gap(&fitted, &expanded),
        fitted_vs_alternate: coeff_gap(&fitted, &alternate),
        fitted,
        expanded,
        alternate,
        affinity_residual,
    })
}

/// Hysteresis rule. From `z = 0` switch on only when `β + α f(x) < 0`;
/// from `z = 1` switch off only when `β − α f(x) < 0`. Ties keep `z`.
pub fn policy_decide(x: &DVector<f64>, z: Switch, system: &SwitchedSystem, sf: &SwitchingFunction) -> Switch {
    let af = system.alpha * sf.eval(x);
    match z {
        Switch::Off if system.beta + af < 0.0 => Switch::On,
        Switch::On if system.beta - af < 0.0 => Switch::Off,
        _ => z,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub k: usize,
    pub x: DVector<f64>,
    /// Switch position before the decision.
    pub z: Switch,
    pub u: Switch,
    pub cost: f64,
    pub y: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub trajectory: Vec<TrajectoryStep>,
    pub discounted_total: f64,
    pub switch_count: usize,
}

fn rollout(
    system: &SwitchedSystem,
    x0: &DVector<f64>,
    z0: Switch,
    steps: usize,
    mut decide: impl FnMut(&DVector<f64>, Switch) -> Switch,
) -> Result<SimulationResult, ControllerError> {
    system.check_dim(x0)?;
    if steps == 0 {
        return Err(ControllerError::InvalidSystem("steps must be at least 1".into()));
    }
    let mut trajectory = Vec::with_capacity(steps);
    let mut x = x0.clone();
    let mut z = z0;
    let mut discount = 1.0;
    let mut total = 0.0;
    let mut switch_count = 0;
    for k in 0..steps {
        let u = decide(&x, z);
        let cost = stage_cost(&x, z, u, system);
        total += discount * cost;
        discount *= system.alpha;
        if u != z {
            switch_count += 1;
        }
        let next = system.step(&x, u);
        trajectory.push(TrajectoryStep {
            k,
            y: system.output.as_ref().map(|o| o.eval(&x)),
            x,
            z,
            u,
            cost,
        });
        x = next;
        z = u;
    }
    Ok(SimulationResult {
        trajectory,
        discounted_total: total,
        switch_count,
    })
}

/// Closed-loop rollout under [`policy_decide`].
pub fn simulate(
    system: &SwitchedSystem,
    x0: &DVector<f64>,
    z0: Switch,
    steps: usize,
    sf: &SwitchingFunction,
) -> Result<SimulationResult, ControllerError> {
    rollout(system, x0, z0, steps, |x, z| policy_decide(x, z, system, sf))
}

/// Discounted cost of holding `u` fixed for `steps` steps.
pub fn evaluate_constant_policy(
    system: &SwitchedSystem,
    u: Switch,
    x0: &DVector<f64>,
    z0: Switch,
    steps: usize,
) -> Result<f64, ControllerError> {
    Ok(rollout(system, x0, z0, steps, |_, _| u)?.discounted_total)
}

/// Axis-aligned grid for the value-iteration oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Points per dimension, including both ends.
    pub points: usize,
}

impl GridSpec {
    /// Same interval `[lo, hi]` on every one of `dim` axes.
    pub fn uniform(dim: usize, lo: f64, hi: f64, points: usize) -> Self {
        GridSpec {
            lower: vec![lo; dim],
            upper: vec![hi; dim],
            points,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn len(&self) -> usize {
        self.points.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self, dim: usize) -> Result<(), ControllerError> {
        let bad = |m: String| Err(ControllerError::InvalidGrid(m));
        if dim == 0 || dim > 2 {
            return bad(format!("grid oracle supports 1 or 2 dimensions, system has {dim}"));
        }
        if self.lower.len() != dim || self.upper.len() != dim {
            return bad(format!("bounds must have {dim} entries"));
        }
        if self.points < 2 {
            return bad("need at least 2 points per dimension".into());
        }
        if self.lower.iter().zip(&self.upper).any(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
            return bad("every lower bound must be below its upper bound".into());
        }
        Ok(())
    }

    fn step(&self, d: usize) -> f64 {
        (self.upper[d] - self.lower[d]) / (self.points - 1) as f64
    }

    /// Coordinates of flat grid index `idx` (first axis varies fastest).
    pub fn point(&self, idx: usize) -> DVector<f64> {
        let mut rem = idx;
        DVector::from_fn(self.dim(), |d, _| {
            let i = rem % self.points;
            rem /= self.points;
            self.lower[d] + i as f64 * self.step(d)
        })
    }

    /// Multilinear interpolation stencil at `x`, clamped into the box.
    /// Returns the stencil and whether clamping occurred.
    fn stencil(&self, x: &DVector<f64>) -> (Vec<(usize, f64)>, bool) {
        let mut clamped = false;
        let mut axes = Vec::with_capacity(self.dim());
        for d in 0..self.dim() {
            let mut c = x[d];
            if c < self.lower[d] {
                c = self.lower[d];
                clamped = true;
            } else if c > self.upper[d] {
                c = self.upper[d];
                clamped = true;
            }
            let s = (c - self.lower[d]) / self.step(d);
            let i = (s.floor() as usize).min(self.points - 2);
            let w = s - i as f64;
            axes.push((i, w));
        }
        let mut stencil = vec![(0usize, 1.0f64)];
        let mut stride = 1;
        for &(i, w) in &axes {
            let mut next = Vec::with_capacity(stencil.len() * 2);
            for &(idx, weight) in &stencil {
                next.push((idx + i * stride, weight * (1.0 - w)));
                next.push((idx + (i + 1) * stride, weight * w));
            }
            stencil = next;
            stride *= self.points;
        }
        stencil.retain(|&(_, w)| w != 0.0);
        (stencil, clamped)
    }
}

/// Tabulated `V_0`, `V_1` from value iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct GridOracle {
    pub grid: GridSpec,
    pub v0: Vec<f64>,
    pub v1: Vec<f64>,
    pub sweeps: usize,
    /// Sup-norm change of each sweep.
    pub residuals: Vec<f64>,
    /// Some successor state left the box and was clamped onto it.
    pub clamped: bool,
}

impl GridOracle {
    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(f64::INFINITY)
    }

    /// `residual[k+1] / residual[k]` over the last `count` sweeps.
    pub fn late_contraction(&self, count: usize) -> f64 {
        let r = &self.residuals;
        let start = r.len().saturating_sub(count + 1);
        r[start..]
            .windows(2)
            .filter(|w| w[0] > 0.0)
            .map(|w| w[1] / w[0])
            .fold(0.0, f64::max)
    }

    pub fn interpolate(&self, z: Switch, x: &DVector<f64>) -> f64 {
        let table = match z {
            Switch::Off => &self.v0,
            Switch::On => &self.v1,
        };
        self.grid.stencil(x).0.iter().map(|&(i, w)| w * table[i]).sum()
    }

    /// Gap between the grid tables and the quadratic over grid points in
    /// the middle third of the box.
    pub fn compare(&self, qv: &QuadraticValue) -> OracleComparison {
        let mut stats = [(0.0f64, 0.0f64); 2];
        let mut count = 0;
        for idx in 0..self.grid.len() {
            let x = self.grid.point(idx);
            let interior = (0..self.grid.dim()).all(|d| {
                let w = self.grid.upper[d] - self.grid.lower[d];
                x[d] >= self.grid.lower[d] + w / 3.0 - 1e-12
                    && x[d] <= self.grid.upper[d] - w / 3.0 + 1e-12
            });
            if !interior {
                continue;
            }
            count += 1;
            let vq = qv.value(&x);
            for (slot, table) in stats.iter_mut().zip([&self.v0, &self.v1]) {
                let gap = (table[idx] - vq).abs();
                slot.0 = slot.0.max(gap);
                slot.1 += gap;
            }
        }
        let mean = |s: f64| if count == 0 { f64::NAN } else { s / count as f64 };
        OracleComparison {
            points: count,
            max_gap_v0: stats[0].0,
            mean_gap_v0: mean(stats[0].1),
            max_gap_v1: stats[1].0,
            mean_gap_v1: mean(stats[1].1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleComparison {
    pub points: usize,
    pub max_gap_v0: f64,
    pub mean_gap_v0: f64,
    pub max_gap_v1: f64,
    pub mean_gap_v1: f64,
}

/// Value iteration on the Bellman equation with the system's own stage
/// cost.
pub fn bellman_value_iteration(
    system: &SwitchedSystem,
    grid: &GridSpec,
    tol: f64,
    max_sweeps: usize,
    exec: Execution,
) -> Result<GridOracle, ControllerError> {
    bellman_value_iteration_with(system, grid, tol, max_sweeps, exec, |x| system.state_cost(x))
}

/// Value iteration with an arbitrary state cost in place of `q`.
///
/// Each sweep is a Jacobi update into fresh tables, so parallel and
/// sequential sweeps produce identical values.
pub fn bellman_value_iteration_with<F>(
    system: &SwitchedSystem,
    grid: &GridSpec,
    tol: f64,
    max_sweeps: usize,
    exec: Execution,
    state_cost: F,
) -> Result<GridOracle, ControllerError>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    grid.validate(system.dim())?;
    if !(tol > 0.0) {
        return Err(ControllerError::InvalidGrid(format!("tolerance must be positive, got {tol}")));
    }
    let len = grid.len();
    let mut clamped = false;
    let mut cost = Vec::with_capacity(len);
    let mut off = Vec::with_capacity(len);
    let mut on = Vec::with_capacity(len);
    for idx in 0..len {
        let x = grid.point(idx);
        cost.push(state_cost(&x));
        let (s0, c0) = grid.stencil(&system.step(&x, Switch::Off));
        let (s1, c1) = grid.stencil(&system.step(&x, Switch::On));
        clamped |= c0 | c1;
        off.push(s0);
        on.push(s1);
    }

    let (alpha, beta) = (system.alpha, system.beta);
    let mut v0 = vec![0.0; len];
    let mut v1 = vec![0.0; len];
    let mut next = vec![(0.0, 0.0); len];
    let mut residuals = Vec::new();
    for sweep in 1..=max_sweeps {
        par::fill_indexed(exec, &mut next, |i| {
            let stay_off: f64 = alpha * off[i].iter().map(|&(j, w)| w * v0[j]).sum::<f64>();
            let stay_on: f64 = alpha * on[i].iter().map(|&(j, w)| w * v1[j]).sum::<f64>();
            (
                cost[i] + stay_off.min(beta + stay_on),
                cost[i] + (beta + stay_off).min(stay_on),
            )
        });
        let mut residual: f64 = 0.0;
        for (i, &(n0, n1)) in next.iter().enumerate() {
            residual = residual.max((n0 - v0[i]).abs()).max((n1 - v1[i]).abs());
            v0[i] = n0;
            v1[i] = n1;
        }
        residuals.push(residual);
        if residual < tol {
            return Ok(GridOracle {
                grid: grid.clone(),
                v0,
                v1,
                sweeps: sweep,
                residuals,
                clamped,
            });
        }
    }
    Err(ControllerError::MaxSweepsExceeded {
        sweeps: max_sweeps,
        residual: residuals.last().copied().unwrap_or(f64::INFINITY),
    })
}

/// JSON form of a [`SwitchedSystem`]. Matrices are row-major nested
/// arrays. When `dt` is present `a` and `b` are continuous-time and are
/// discretised with [`discretize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<f64>>,
}

fn matrix_from_rows(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>, ControllerError> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != m) {
        return Err(ControllerError::InvalidSystem(format!("{name} has ragged rows")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

impl SystemConfig {
    /// Build the discrete system plus, for continuous input, the
    /// discretisation stability advisory.
    pub fn build(&self) -> Result<(SwitchedSystem, Option<StabilityAdvisory>), ControllerError> {
        let a = matrix_from_rows(&self.a, "a")?;
        let b = DVector::from_column_slice(&self.b);
        let (a, b, advisory) = match self.dt {
            Some(dt) => {
                let d = discretize(&a, &b, dt)?;
                (d.a, d.b, Some(d.advisory))
            }
            None => (a, b, None),
        };
        let q = matrix_from_rows(&self.q, "q")?;
        let mut system = SwitchedSystem::new(a, b, self.alpha, self.beta, q, DVector::from_column_slice(&self.r))?;
        if let Some(h) = &self.h {
            system = system.with_output(DVector::from_column_slice(h))?;
        }
        Ok((system, advisory))
    }

    pub fn from_system(system: &SwitchedSystem) -> Self {
        let rows = |m: &DMatrix<f64>| {
            m.row_iter()
                .map(|r| r.iter().copied().collect())
                .collect::<Vec<Vec<f64>>>()
        };
        SystemConfig {
            a: rows(&system.a),
            b: system.b.iter().copied().collect(),
            alpha: system.alpha,
            beta: system.beta,
            q: rows(&system.q),
            r: system.r.iter().copied().collect(),
            dt: None,
            h: system.output.as_ref().map(|o| o.h_row.iter().copied().collect()),
        }
    }
}
