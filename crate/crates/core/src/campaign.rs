//! Monte-Carlo estimation campaigns over independent noise realisations.

use serde::{Deserialize, Serialize};

use crate::measurement::{generate_measurements_with, MeasurementError, Noise, PlanEntry};
use crate::network::{AdmittanceMatrix, Network};
use crate::par::{self, Execution};
use crate::power_flow::StateVector;
use crate::wls::{estimate, EstimationError, EstimatorConfig};

/// Child seed `index` of `base` (SplitMix64 finaliser over a golden-ratio
/// stride). Stable across platforms and releases.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest angle and magnitude error against the truth.
    pub max_angle_error: f64,
    pub max_magnitude_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub trials: Vec<TrialOutcome>,
    pub measurements: usize,
    pub state_dim: usize,
    pub mean_objective: f64,
}

impl CampaignSummary {
    /// `m − n`, the expected value of `J(x̂)` under correctly weighted
    /// Gaussian noise.
    pub fn degrees_of_freedom(&self) -> usize {
        self.measurements - self.state_dim
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum CampaignError {
    #[error("trial {trial}: {source}")]
    Measurement {
        trial: usize,
        source: MeasurementError,
    },
    #[error("trial {trial}: {source}")]
    Estimation {
        trial: usize,
        source: EstimationError,
    },
    #[error("campaign needs at least one trial")]
    Empty,
}

/// Run `trials` independent estimations against `truth`, trial `k` using
/// noise seed `derive_seed(seed, k)`. Trials are independent of each other,
/// so the summary is identical for every [`Execution`] mode.
#[allow(clippy::too_many_arguments)]
pub fn chi_square_campaign(
    network: &Network,
    ybus: &AdmittanceMatrix,
    truth: &StateVector,
    plan: &[PlanEntry],
    config: &EstimatorConfig,
    seed: u64,
    trials: usize,
    exec: Execution,
) -> Result<CampaignSummary, CampaignError> {
    if trials == 0 {
        return Err(CampaignError::Empty);
    }
    let outcomes = par::map_indexed(exec, trials, |trial| {
        let trial_seed = derive_seed(seed, trial as u64);
        let set = generate_measurements_with(
            truth,
            plan,
            trial_seed,
            Noise::Gaussian,
            network,
            ybus,
            Execution::Sequential,
        )
        .map_err(|source| CampaignError::Measurement { trial, source })?;
        let res = estimate(network, ybus, &set, config)
            .map_err(|source| CampaignError::Estimation { trial, source })?;
        let (da, dv) = res.state.max_abs_diff(truth);
        Ok(TrialOutcome {
            seed: trial_seed,
            objective: res.objective,
            iterations: res.iterations,
            converged: res.converged,
            max_angle_error: da,
            max_magnitude_error: dv,
        })
    });
    let trials: Vec<TrialOutcome> = outcomes.into_iter().collect::<Result<_, _>>()?;
    let mean_objective = trials.iter().map(|t| t.objective).sum::<f64>() / trials.len() as f64;
    Ok(CampaignSummary {
        trials,
        measurements: plan.len(),
        state_dim: network.state_dim(),
        mean_objective,
    })
}
