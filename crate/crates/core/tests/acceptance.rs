//! One check per acceptance criterion. Each prints a PASS or FAIL line and
//! the process exits non-zero if any check fails.

mod common;

use std::process::Command;
use std::time::{Duration, Instant};

use gridstate::campaign::{chi_square_campaign, derive_seed};
use gridstate::case::CaseBundle;
use gridstate::controller::{
    bellman_value_iteration, evaluate_constant_policy, simulate, solve_quadratic_value,
    spectral_radius, switching_function, GridSpec, Switch, SwitchedSystem,
};
use gridstate::formats::fixed4;
use gridstate::measurement::{
    evaluate_h, full_measurement_plan, generate_measurements, jacobian_h, Noise, DEFAULT_SIGMA_FLOW,
    DEFAULT_SIGMA_INJ, DEFAULT_SIGMA_V,
};
use gridstate::network::build_ybus;
use gridstate::par::Execution;
use gridstate::power_flow::{solve_power_flow, StateVector};
use gridstate::scenario::{run_snapshots, SnapshotPlan};
use gridstate::wls::{estimate, EstimatorConfig};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, format!("took {elapsed:?}, limit {limit:?}"))
}

fn power_flow_converges() -> Check {
    let t = Instant::now();
    let net = CaseBundle::ieee14().network;
    let ybus = build_ybus(&net).map_err(|e| e.to_string())?;
    let pf = solve_power_flow(&net, &ybus, 1e-8, 20, None).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    ensure(pf.converged, "did not converge")?;
    ensure(pf.max_mismatch < 1e-8, format!("mismatch {:e}", pf.max_mismatch))?;
    ensure(pf.iterations <= 10, format!("{} iterations", pf.iterations))?;
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("{} iterations, mismatch {:.1e}, {elapsed:?}", pf.iterations, pf.max_mismatch))
}

fn zero_noise_recovery() -> Check {
    let t = Instant::now();
    let fx = common::ieee14();
    let plan = full_measurement_plan(&fx.network, DEFAULT_SIGMA_V, DEFAULT_SIGMA_INJ, DEFAULT_SIGMA_FLOW);
    ensure(plan.len() == 122, format!("plan has {} entries", plan.len()))?;
    let set = generate_measurements(&fx.truth, &plan, 0, Noise::Off, &fx.network, &fx.ybus).map_err(|e| e.to_string())?;
    let res = estimate(&fx.network, &fx.ybus, &set, &EstimatorConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let (da, dv) = res.state.max_abs_diff(&fx.truth);
    ensure(res.converged, "did not converge")?;
    ensure(dv < 1e-6, format!("max |dV| {dv:e}"))?;
    ensure(da < 1e-6, format!("max |dθ| {da:e}"))?;
    ensure(res.objective < 1e-10, format!("J {:e}", res.objective))?;
    within(elapsed, Duration::from_secs(5))?;
    Ok(format!("|dV| {dv:.1e}, |dθ| {da:.1e}, J {:.1e}, {elapsed:?}", res.objective))
}

fn jacobian_matches_finite_differences() -> Check {
    let fx = common::ieee14();
    let plan = full_measurement_plan(&fx.network, DEFAULT_SIGMA_V, DEFAULT_SIGMA_INJ, DEFAULT_SIGMA_FLOW);
    let set = generate_measurements(&fx.truth, &plan, 0, Noise::Off, &fx.network, &fx.ybus).map_err(|e| e.to_string())?;
    let slack = fx.network.slack_index();
    let mut rng = common::rng(20);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let state = common::random_state(14, slack, &mut rng);
        let h = jacobian_h(&set, &state, &fx.network, &fx.ybus);
        let f = |x: &DVector<f64>| evaluate_h(&set, &StateVector::from_vector(x, slack), &fx.network, &fx.ybus);
        let fd = common::fd_jacobian(f, &state.to_vector(slack), 1e-6);
        worst = worst.max(common::max_rel_error(&h, &fd));
    }
    ensure(worst < 1e-6, format!("max relative error {worst:e}"))?;
    Ok(format!("20 states, max relative error {worst:.1e}"))
}

fn chi_square_consistency() -> Check {
    let t = Instant::now();
    let fx = common::ieee14();
    let plan = full_measurement_plan(&fx.network, DEFAULT_SIGMA_V, DEFAULT_SIGMA_INJ, DEFAULT_SIGMA_FLOW);
    let summary = chi_square_campaign(
        &fx.network,
        &fx.ybus,
        &fx.truth,
        &plan,
        &EstimatorConfig::default(),
        2024,
        200,
        Execution::default(),
    )
    .map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let dof = summary.degrees_of_freedom() as f64;
    ensure(dof == 95.0, format!("m − n = {dof}"))?;
    ensure(summary.trials.iter().all(|t| t.converged), "a trial did not converge")?;
    let ratio = summary.mean_objective / dof;
    ensure((ratio - 1.0).abs() <= 0.15, format!("mean J {:.2}", summary.mean_objective))?;
    within(elapsed, Duration::from_secs(120))?;
    Ok(format!("mean J {:.2} over 200 seeds (m − n = 95), {elapsed:?}", summary.mean_objective))
}

fn angle_pattern() -> Check {
    let bundle = CaseBundle::ieee14();
    let report = run_snapshots(&bundle, &SnapshotPlan::new(vec![1.0, 1.0], 2024)).map_err(|e| e.to_string())?;
    ensure(report.all_succeeded(), "a snapshot failed")?;
    let mut lowest = Vec::new();
    for snap in &report.snapshots {
        let truth = snap.truth.as_ref().unwrap();
        let est = snap.estimate.as_ref().unwrap();
        for (label, state) in [("truth", truth), ("estimate", est)] {
            let deg: Vec<f64> = state.angles.iter().map(|a| a.to_degrees()).collect();
            ensure(fixed4(deg[0]) == "0.0000", format!("{label} slack angle {}", fixed4(deg[0])))?;
            ensure(deg[1..].iter().all(|&a| a < 0.0), format!("{label}: a non-slack angle is not negative"))?;
            let min = deg.iter().enumerate().fold(0, |m, (k, &a)| if a < deg[m] { k } else { m });
            ensure(min == 13, format!("{label}: most negative angle at bus {}", min + 1))?;
            lowest.push(deg[13]);
        }
    }
    Ok(format!(
        "bus 14 lowest at t−1 and t (estimates {:.4}°, {:.4}°)",
        lowest[1], lowest[3]
    ))
}

fn warm_start_memory() -> Check {
    let bundle = CaseBundle::ieee14();
    let mut compared = 0;
    let mut saved = 0;
    for trial in 0..20u64 {
        let mut rng = common::rng(derive_seed(606, trial));
        let scales: Vec<f64> = (0..4).map(|_| rng.random_range(0.9..1.1)).collect();
        let mut plan = SnapshotPlan::new(scales, derive_seed(7, trial));
        plan.compare_flat_start = true;
        let report = run_snapshots(&bundle, &plan).map_err(|e| e.to_string())?;
        ensure(report.all_succeeded(), format!("trial {trial}: a snapshot failed"))?;
        for snap in &report.snapshots[1..] {
            let flat = snap.flat_start_iterations.ok_or("missing flat-start count")?;
            ensure(
                snap.iterations <= flat,
                format!("trial {trial} snapshot {}: warm {} > flat {flat}", snap.index, snap.iterations),
            )?;
            compared += 1;
            saved += flat - snap.iterations;
        }
    }
    Ok(format!("{compared} warm snapshots, none slower; {saved} iterations saved"))
}

fn controller_fixed_point() -> Check {
    let sys = SwitchedSystem::scalar_example();
    let qv = solve_quadratic_value(&sys).map_err(|e| e.to_string())?;
    let closed = 1.0 / (1.0 - 0.95 * 0.81);
    let gap = (qv.p[(0, 0)] - closed).abs();
    ensure(gap < 1e-12, format!("P {} vs {closed}, gap {gap:e}", qv.p[(0, 0)]))?;
    Ok(format!("P = {:.15} after {} sweeps, gap {gap:.1e}", qv.p[(0, 0)], qv.iterations))
}

fn random_stable_system(rng: &mut rand_chacha::ChaCha8Rng) -> SwitchedSystem {
    let mut a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
    let rho = spectral_radius(&a);
    let target = rng.random_range(0.3..0.95);
    a *= target / rho;
    let l = DMatrix::from_fn(2, 2, |i, j| if j <= i { rng.random_range(-1.0..1.0) } else { 0.0 });
    let q = &l * l.transpose() + DMatrix::identity(2, 2) * 0.1;
    SwitchedSystem::new(
        a,
        DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5)),
        rng.random_range(0.8..0.99),
        rng.random_range(0.0..0.5),
        q,
        DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
    )
    .expect("valid system")
}

fn switching_function_affine() -> Check {
    let mut rng = common::rng(88);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let sys = random_stable_system(&mut rng);
        let qv = solve_quadratic_value(&sys).map_err(|e| e.to_string())?;
        let f = switching_function(&sys, &qv).map_err(|e| e.to_string())?.fitted;
        for _ in 0..50 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            let direct = qv.value(&sys.step(&x, Switch::On)) - qv.value(&sys.step(&x, Switch::Off));
            worst = worst.max((direct - f.eval(&x)).abs() / direct.abs().max(1.0));
        }
    }
    ensure(worst < 1e-9, format!("max deviation {worst:e}"))?;
    Ok(format!("10 systems × 50 points, max deviation {worst:.1e}"))
}

fn bellman_oracle() -> Check {
    let sys = SwitchedSystem::scalar_example();
    let grid = GridSpec::uniform(1, -0.5, 1.5, 201);
    let oracle = bellman_value_iteration(&sys, &grid, 1e-8, 100_000, Execution::default()).map_err(|e| e.to_string())?;
    let residual = oracle.final_residual();
    let contraction = oracle.late_contraction(20);
    ensure(residual < 1e-8, format!("residual {residual:e}"))?;
    ensure(contraction <= sys.alpha + 0.01, format!("contraction {contraction}"))?;
    let qv = solve_quadratic_value(&sys).map_err(|e| e.to_string())?;
    let cmp = oracle.compare(&qv);
    ensure(cmp.points > 0, "empty comparison")?;
    Ok(format!(
        "{} sweeps, residual {residual:.1e}, contraction {contraction:.4}; quadratic gap max {:.3} mean {:.3}",
        oracle.sweeps, cmp.max_gap_v0, cmp.mean_gap_v0
    ))
}

fn policy_sanity() -> Check {
    let x0 = DVector::from_element(1, 0.0);
    let base = SwitchedSystem::scalar_example();
    let run = |beta: f64| -> Result<_, String> {
        let sys = SwitchedSystem::new(base.a.clone(), base.b.clone(), base.alpha, beta, base.q.clone(), base.r.clone())
            .map_err(|e| e.to_string())?;
        let qv = solve_quadratic_value(&sys).map_err(|e| e.to_string())?;
        let sf = switching_function(&sys, &qv).map_err(|e| e.to_string())?.fitted;
        let sim = simulate(&sys, &x0, Switch::Off, 200, &sf).map_err(|e| e.to_string())?;
        Ok((sys, sf, sim))
    };

    let (sys, _, sim) = run(base.beta)?;
    let off = evaluate_constant_policy(&sys, Switch::Off, &x0, Switch::Off, 200).map_err(|e| e.to_string())?;
    let on = evaluate_constant_policy(&sys, Switch::On, &x0, Switch::Off, 200).map_err(|e| e.to_string())?;
    ensure(
        sim.discounted_total <= off.min(on),
        format!("policy {} vs constants {off} / {on}", sim.discounted_total),
    )?;

    let (_, _, frozen) = run(1e6)?;
    ensure(frozen.switch_count == 0, format!("{} switches with large β", frozen.switch_count))?;

    let (_, sf, free) = run(0.0)?;
    for step in &free.trajectory {
        let f = sf.eval(&step.x);
        let myopic = if f < 0.0 {
            Switch::On
        } else if f > 0.0 {
            Switch::Off
        } else {
            step.z
        };
        ensure(step.u == myopic, format!("β = 0: step {} is not myopic", step.k))?;
    }
    Ok(format!(
        "cost {:.4} ≤ min({off:.4}, {on:.4}); large β: 0 switches; β = 0: myopic at all 200 steps",
        sim.discounted_total
    ))
}

fn snapshots_deterministic() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let path = dir.path().join(name);
        let out = Command::new(env!("CARGO_BIN_EXE_gridstate"))
            .args(["snapshots", "--case", "ieee14", "--count", "4", "--load-scale", "1.0,1.03,0.97,1.05", "--seed", "99"])
            .arg("--out")
            .arg(&path)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), format!("exit {:?}", out.status.code()))?;
        std::fs::read(&path).map_err(|e| e.to_string())
    };
    let (a, b) = (run("first.csv")?, run("second.csv")?);
    ensure(a == b, "reports differ")?;
    Ok(format!("two runs, {} identical bytes", a.len()))
}

fn main() {
    let checks: [Criterion; 11] = [
        ("1 power flow converges", power_flow_converges),
        ("2 zero-noise recovery", zero_noise_recovery),
        ("3 measurement Jacobian", jacobian_matches_finite_differences),
        ("4 chi-square consistency", chi_square_consistency),
        ("5 angle pattern", angle_pattern),
        ("6 snapshot memory", warm_start_memory),
        ("7 controller fixed point", controller_fixed_point),
        ("8 switching function affinity", switching_function_affine),
        ("9 Bellman grid oracle", bellman_oracle),
        ("10 policy sanity", policy_sanity),
        ("11 snapshot determinism", snapshots_deterministic),
    ];
    let mut failed = Vec::new();
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                println!("FAIL {name}: {why}");
                failed.push(name);
            }
        }
    }
    println!("acceptance: {} passed, {} failed", checks.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
