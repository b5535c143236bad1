mod common;

use gridstate::campaign::{chi_square_campaign, derive_seed};
use gridstate::measurement::{
    evaluate_h, full_measurement_plan, generate_measurements, generate_measurements_with,
    jacobian_h, noise_sample, Measurement, MeasurementError, MeasurementKind, MeasurementSet,
    Noise, DEFAULT_SIGMA_FLOW, DEFAULT_SIGMA_INJ, DEFAULT_SIGMA_V,
};
use gridstate::par::Execution;
use gridstate::power_flow::StateVector;
use gridstate::wls::{estimate, gn_step, EstimationError, EstimatorConfig};
use nalgebra::DVector;
use proptest::prelude::*;

fn default_plan(fx: &common::Fixture) -> Vec<gridstate::measurement::PlanEntry> {
    full_measurement_plan(&fx.network, DEFAULT_SIGMA_V, DEFAULT_SIGMA_INJ, DEFAULT_SIGMA_FLOW)
}

fn noisy_set(fx: &common::Fixture, seed: u64) -> MeasurementSet {
    generate_measurements(&fx.truth, &default_plan(fx), seed, Noise::Gaussian, &fx.network, &fx.ybus).unwrap()
}

#[test]
fn measurement_jacobian_matches_finite_differences() {
    let fx = common::ieee14();
    let set = noisy_set(&fx, 3);
    let slack = fx.network.slack_index();
    let mut rng = common::rng(11);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let state = common::random_state(14, slack, &mut rng);
        let h = jacobian_h(&set, &state, &fx.network, &fx.ybus);
        let f = |x: &DVector<f64>| evaluate_h(&set, &StateVector::from_vector(x, slack), &fx.network, &fx.ybus);
        let fd = common::fd_jacobian(f, &state.to_vector(slack), 1e-6);
        worst = worst.max(common::max_rel_error(&h, &fd));
    }
    assert!(worst < 1e-6, "max relative error {worst:e}");
}

#[test]
fn noise_has_requested_spread() {
    let sigma = 0.01;
    let draws: Vec<f64> = (0..10_000).map(|i| sigma * noise_sample(77, i)).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
    let sd = var.sqrt();
    assert!((sd / sigma - 1.0).abs() < 0.05, "sd {sd}");
    assert!(mean.abs() < 4.0 * sigma / 100.0, "mean {mean}");
}

#[test]
fn measurements_are_deterministic_across_modes() {
    let fx = common::ieee14();
    let plan = default_plan(&fx);
    let run = |exec| {
        generate_measurements_with(&fx.truth, &plan, 42, Noise::Gaussian, &fx.network, &fx.ybus, exec).unwrap()
    };
    let seq = run(Execution::Sequential);
    assert_eq!(seq, run(Execution::Sequential));
    assert_eq!(seq, run(Execution::Parallel));
    assert_ne!(seq, noisy_set(&fx, 43));
}

#[test]
fn voltage_only_plan_is_unobservable() {
    let fx = common::ieee14();
    let ms: Vec<Measurement> = (0..28)
        .map(|k| Measurement {
            kind: MeasurementKind::VoltageMagnitude { bus: k % 14 + 1 },
            value: 1.0,
            sigma: DEFAULT_SIGMA_V,
        })
        .collect();
    let set = MeasurementSet::new(ms, &fx.network).unwrap();
    let err = estimate(&fx.network, &fx.ybus, &set, &EstimatorConfig::default()).unwrap_err();
    assert!(matches!(err, EstimationError::SingularGain { .. }), "{err:?}");
}

#[test]
fn short_plan_is_rejected() {
    let fx = common::ieee14();
    let plan = &default_plan(&fx)[..26];
    let err = generate_measurements(&fx.truth, plan, 1, Noise::Off, &fx.network, &fx.ybus).unwrap_err();
    assert!(matches!(err, MeasurementError::TooFewMeasurements { m: 26, .. }), "{err:?}");
}

#[test]
fn gauss_newton_step_matches_qr_least_squares() {
    let fx = common::ieee14();
    let set = noisy_set(&fx, 5);
    for state in [StateVector::flat(&fx.network), fx.truth.clone()] {
        let step = gn_step(&state, &set, &fx.network, &fx.ybus).unwrap();
        let h = jacobian_h(&set, &state, &fx.network, &fx.ybus);
        let r = set.values() - evaluate_h(&set, &state, &fx.network, &fx.ybus);
        let w = set.sigmas().map(|s| 1.0 / s);
        let mut hw = h.clone();
        for (i, mut row) in hw.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let rw = r.component_mul(&w);
        let qr = hw.qr();
        let dx = qr.r().solve_upper_triangular(&(qr.q().transpose() * rw)).unwrap();
        let gap = (&step.dx - &dx).amax();
        assert!(gap < 1e-10, "gap {gap:e}");
        assert_eq!(step.dx.len(), 27);
    }
}

#[test]
fn objective_never_increases_on_noisy_data() {
    let fx = common::ieee14();
    for seed in 0..10 {
        let res = estimate(&fx.network, &fx.ybus, &noisy_set(&fx, seed), &EstimatorConfig::default()).unwrap();
        assert!(res.converged);
        for pair in res.objective_history.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-9), "seed {seed}: {:?}", res.objective_history);
        }
        let j: f64 = res
            .residuals
            .iter()
            .zip(noisy_set(&fx, seed).sigmas().iter())
            .map(|(r, s)| (r / s).powi(2))
            .sum();
        assert!((j - res.objective).abs() < 1e-9 * j.max(1.0));
    }
}

#[test]
fn estimate_does_not_depend_on_start() {
    let fx = common::ieee14();
    let set = noisy_set(&fx, 9);
    let flat = estimate(&fx.network, &fx.ybus, &set, &EstimatorConfig::default()).unwrap();
    let warm = estimate(&fx.network, &fx.ybus, &set, &EstimatorConfig::default().warm(fx.truth.clone())).unwrap();
    let (da, dv) = flat.state.max_abs_diff(&warm.state);
    assert!(da < 1e-6 && dv < 1e-6, "{da:e} {dv:e}");
    assert!((flat.objective - warm.objective).abs() < 1e-6 * flat.objective);
}

#[test]
fn bus_fourteen_stays_lowest_under_noise() {
    let fx = common::ieee14();
    let res = estimate(&fx.network, &fx.ybus, &noisy_set(&fx, 1), &EstimatorConfig::default()).unwrap();
    let angles = &res.state.angles;
    assert_eq!(angles[0], 0.0);
    assert!(angles[1..].iter().all(|&a| a < 0.0));
    let lowest = angles.iter().enumerate().fold(0, |m, (k, &a)| if a < angles[m] { k } else { m });
    assert_eq!(lowest, 13);
}

#[test]
fn campaign_is_identical_in_both_modes() {
    let fx = common::ieee14();
    let plan = default_plan(&fx);
    let run = |exec| {
        chi_square_campaign(&fx.network, &fx.ybus, &fx.truth, &plan, &EstimatorConfig::default(), 2024, 8, exec).unwrap()
    };
    let (seq, par) = (run(Execution::Sequential), run(Execution::Parallel));
    assert_eq!(seq, par);
    assert_eq!(seq.trials.len(), 8);
    assert_eq!(seq.degrees_of_freedom(), 95);
    assert_eq!(seq.trials[3].seed, derive_seed(2024, 3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn measurement_order_does_not_change_estimate(seed in any::<u64>(), shuffle in any::<u64>()) {
        let fx = common::ieee14();
        let set = noisy_set(&fx, seed);
        let mut ms = set.measurements().to_vec();
        let n = ms.len();
        let mut s = shuffle;
        for i in (1..n).rev() {
            s = derive_seed(s, i as u64);
            ms.swap(i, (s % (i as u64 + 1)) as usize);
        }
        let permuted = MeasurementSet::new(ms, &fx.network).unwrap();
        let cfg = EstimatorConfig::default();
        let a = estimate(&fx.network, &fx.ybus, &set, &cfg).unwrap();
        let b = estimate(&fx.network, &fx.ybus, &permuted, &cfg).unwrap();
        let (da, dv) = a.state.max_abs_diff(&b.state);
        prop_assert!(da < 1e-12 && dv < 1e-12, "{da:e} {dv:e}");
    }

    #[test]
    fn noise_free_data_recovers_truth_under_load_change(scale in 0.6..1.3f64) {
        let fx = common::ieee14();
        let net = fx.network.with_load_scale(|_| scale);
        let pf = gridstate::power_flow::solve_power_flow(&net, &fx.ybus, 1e-10, 20, None).unwrap();
        prop_assume!(pf.converged);
        let plan = full_measurement_plan(&net, DEFAULT_SIGMA_V, DEFAULT_SIGMA_INJ, DEFAULT_SIGMA_FLOW);
        let set = generate_measurements(&pf.state, &plan, 0, Noise::Off, &net, &fx.ybus).unwrap();
        let res = estimate(&net, &fx.ybus, &set, &EstimatorConfig::default()).unwrap();
        let (da, dv) = res.state.max_abs_diff(&pf.state);
        prop_assert!(da < 1e-6 && dv < 1e-6);
        prop_assert!(res.objective < 1e-10);
    }
}
