#![allow(dead_code)]

use gridstate::case::CaseBundle;
use gridstate::network::{build_ybus, AdmittanceMatrix, Network};
use gridstate::power_flow::{solve_power_flow, StateVector, DEFAULT_MAX_ITER, DEFAULT_TOL};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Built-in 14-bus case solved by an independent complex-power root finder.
pub const TRUTH_V: [f64; 14] = [
    1.06,
    1.045,
    1.01,
    1.0260926984133811,
    1.0325979487861963,
    1.07,
    1.0448119747522406,
    1.09,
    1.0276308935654503,
    1.027543352925052,
    1.0449433165091537,
    1.0530173102591334,
    1.0462341058606504,
    1.0174332530283527,
];

pub const TRUTH_ANGLE_DEG: [f64; 14] = [
    0.0,
    -4.956517998111166,
    -12.632826536301067,
    -10.365948818001085,
    -8.946726007999684,
    -14.8793782130576,
    -13.450310239607688,
    -13.450310239607687,
    -15.06987888379926,
    -15.318133646754362,
    -15.213439259009892,
    -15.719676703559417,
    -15.738262801654766,
    -16.393991160280788,
];

pub const TRUTH_LOSS_PU: f64 = 0.135288527221653;

pub struct Fixture {
    pub network: Network,
    pub ybus: AdmittanceMatrix,
    pub truth: StateVector,
}

pub fn ieee14() -> Fixture {
    let network = CaseBundle::ieee14().network;
    let ybus = build_ybus(&network).unwrap();
    let pf = solve_power_flow(&network, &ybus, DEFAULT_TOL, DEFAULT_MAX_ITER, None).unwrap();
    assert!(pf.converged);
    Fixture {
        network,
        ybus,
        truth: pf.state,
    }
}

/// Angles in ±0.5 rad (slack at 0), magnitudes in [0.9, 1.1].
pub fn random_state(n: usize, slack: usize, rng: &mut ChaCha8Rng) -> StateVector {
    StateVector {
        angles: (0..n)
            .map(|k| if k == slack { 0.0 } else { rng.random_range(-0.5..0.5) })
            .collect(),
        magnitudes: (0..n).map(|_| rng.random_range(0.9..1.1)).collect(),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central-difference Jacobian of `f` at `x`.
pub fn fd_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, x.len());
    for j in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

/// Largest `|a − b| / max(1, |a|)` over all entries.
pub fn max_rel_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}
