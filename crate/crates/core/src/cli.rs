//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when a solver fails to converge (or the
//! gain matrix is singular), 2 on bad input or usage.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;

use crate::case::{load_case, CaseBundle};
use crate::controller::{
    bellman_value_iteration, simulate, solve_quadratic_value, switching_function, ControllerError,
    GridSpec, OracleComparison, StabilityAdvisory, Switch, SwitchedSystem, SystemConfig,
};
use crate::formats::{self, ReportFormat};
use crate::measurement::{
    full_measurement_plan, generate_measurements, MeasurementSet, Noise, DEFAULT_SIGMA_FLOW,
    DEFAULT_SIGMA_INJ, DEFAULT_SIGMA_V,
};
use crate::network::build_ybus;
use crate::par::Execution;
use crate::power_flow::{self, solve_power_flow, PowerFlowResult, StateVector};
use crate::scenario::{run_snapshots, Sigmas, SnapshotPlan};
use crate::wls::{self, estimate, EstimationError, EstimationResult, EstimatorConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_CONVERGED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "gridstate", version, about = "Power-system state estimation and switch-state control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Newton–Raphson power flow; prints the solution as JSON.
    Pf {
        #[arg(long)]
        case: PathBuf,
        #[arg(long, default_value_t = power_flow::DEFAULT_TOL)]
        tol: f64,
        #[arg(long = "max-iter", default_value_t = power_flow::DEFAULT_MAX_ITER)]
        max_iter: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesise measurements from the power-flow truth and estimate.
    Estimate(EstimateArgs),
    /// Multi-snapshot estimation with warm starts.
    Snapshots {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        count: usize,
        /// Comma-separated load multipliers, one per snapshot.
        #[arg(long = "load-scale", value_delimiter = ',', required = true)]
        load_scale: Vec<f64>,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        sigmas: SigmaArgs,
        #[arg(long = "noise-off")]
        noise_off: bool,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Binary switch-state controller.
    #[command(subcommand)]
    Controller(ControllerCommand),
}

#[derive(Debug, Args)]
struct SigmaArgs {
    #[arg(long = "sigma-v", default_value_t = DEFAULT_SIGMA_V)]
    sigma_v: f64,
    #[arg(long = "sigma-inj", default_value_t = DEFAULT_SIGMA_INJ)]
    sigma_inj: f64,
    #[arg(long = "sigma-flow", default_value_t = DEFAULT_SIGMA_FLOW)]
    sigma_flow: f64,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[arg(long)]
    case: PathBuf,
    #[arg(long, required_unless_present_any = ["measurements", "noise_off"])]
    seed: Option<u64>,
    #[command(flatten)]
    sigmas: SigmaArgs,
    #[arg(long = "noise-off")]
    noise_off: bool,
    /// Estimate from this measurement CSV instead of synthesising one.
    #[arg(long, conflicts_with_all = ["seed", "noise_off"])]
    measurements: Option<PathBuf>,
    /// Also write the synthesised measurements as CSV.
    #[arg(long = "write-measurements")]
    write_measurements: Option<PathBuf>,
    #[arg(long, default_value_t = wls::DEFAULT_TOL)]
    tol: f64,
    #[arg(long = "max-iter", default_value_t = wls::DEFAULT_MAX_ITER)]
    max_iter: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum ControllerCommand {
    /// Solve the quadratic value and switching function; prints JSON.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop rollout; prints the trajectory as CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        x0: Vec<f64>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=1))]
        z0: u8,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid value iteration; prints the V tables as CSV and the
    /// comparison with the quadratic on standard error.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        /// `LO,HI`, applied to every axis.
        #[arg(long = "box", value_delimiter = ',', num_args = 1, allow_hyphen_values = true)]
        bounds: Vec<f64>,
        #[arg(long)]
        resolution: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long = "max-sweeps", default_value_t = 100_000)]
        max_sweeps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the comparison report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

/// A failed command: message plus exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn input(e: impl std::fmt::Display) -> Self {
        Failure {
            code: EXIT_INPUT,
            message: e.to_string(),
        }
    }

    fn solver(e: impl std::fmt::Display) -> Self {
        Failure {
            code: EXIT_NOT_CONVERGED,
            message: e.to_string(),
        }
    }
}

impl From<EstimationError> for Failure {
    fn from(e: EstimationError) -> Self {
        match e {
            EstimationError::SingularGain { .. } => Failure::solver(e),
            _ => Failure::input(e),
        }
    }
}

impl From<ControllerError> for Failure {
    fn from(e: ControllerError) -> Self {
        match e {
            ControllerError::FixedPointNotConverged(_)
            | ControllerError::MaxSweepsExceeded { .. }
            | ControllerError::NonAffineResidual(_) => Failure::solver(e),
            _ => Failure::input(e),
        }
    }
}

/// Output of a command: text for stdout or `--out`, plus whether every
/// solver converged.
struct Output {
    text: String,
    converged: bool,
}

/// Parse `argv` (including the program name) and run the command.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let (out_path, result) = run(cli.command);
    match result {
        Ok(output) => {
            if let Err(f) = write_output(out_path.as_deref(), &output.text) {
                eprintln!("error: {}", f.message);
                return f.code;
            }
            if output.converged {
                EXIT_OK
            } else {
                eprintln!("error: solver did not converge");
                EXIT_NOT_CONVERGED
            }
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => formats::write_text(p, text).map_err(Failure::input),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(Failure::input),
    }
}

fn run(command: Command) -> (Option<PathBuf>, Result<Output, Failure>) {
    match command {
        Command::Pf {
            case,
            tol,
            max_iter,
            out,
        } => (out, cmd_pf(&case, tol, max_iter)),
        Command::Estimate(args) => (args.out.clone(), cmd_estimate(&args)),
        Command::Snapshots {
            case,
            count,
            load_scale,
            seed,
            sigmas,
            noise_off,
            format,
            out,
        } => (
            out,
            cmd_snapshots(&case, count, load_scale, seed, &sigmas, noise_off, format),
        ),
        Command::Controller(ControllerCommand::Solve { config, out }) => (out, cmd_solve(&config)),
        Command::Controller(ControllerCommand::Simulate {
            config,
            steps,
            x0,
            z0,
            out,
        }) => (out, cmd_simulate(&config, steps, &x0, z0)),
        Command::Controller(ControllerCommand::Oracle {
            config,
            bounds,
            resolution,
            tol,
            max_sweeps,
            out,
            report,
        }) => (
            out,
            cmd_oracle(&config, &bounds, resolution, tol, max_sweeps, report.as_deref()),
        ),
    }
}

fn load(case: &Path) -> Result<CaseBundle, Failure> {
    load_case(case).map_err(Failure::input)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    s
}

fn truth_for(bundle: &CaseBundle, tol: f64, max_iter: usize) -> Result<PowerFlowResult, Failure> {
    let network = bundle.network.with_load_scale(|k| bundle.bus_load_scale[k]);
    let ybus = build_ybus(&network).map_err(Failure::input)?;
    solve_power_flow(&network, &ybus, tol, max_iter, None).map_err(|e| match e {
        power_flow::PowerFlowError::SingularJacobian(_) => Failure::solver(e),
        _ => Failure::input(e),
    })
}

#[derive(Serialize)]
struct BusState {
    bus: usize,
    v_pu: f64,
    angle_deg: f64,
}

fn bus_table(state: &StateVector) -> Vec<BusState> {
    state
        .magnitudes
        .iter()
        .zip(&state.angles)
        .enumerate()
        .map(|(k, (&v, &a))| BusState {
            bus: k + 1,
            v_pu: v,
            angle_deg: a.to_degrees(),
        })
        .collect()
}

fn cmd_pf(case: &Path, tol: f64, max_iter: usize) -> Result<Output, Failure> {
    let bundle = load(case)?;
    let pf = truth_for(&bundle, tol, max_iter)?;
    #[derive(Serialize)]
    struct PfOut<'a> {
        converged: bool,
        iterations: usize,
        max_mismatch: f64,
        buses: Vec<BusState>,
        state: &'a StateVector,
    }
    let text = to_json(&PfOut {
        converged: pf.converged,
        iterations: pf.iterations,
        max_mismatch: pf.max_mismatch,
        buses: bus_table(&pf.state),
        state: &pf.state,
    });
    Ok(Output {
        text,
        converged: pf.converged,
    })
}

fn cmd_estimate(args: &EstimateArgs) -> Result<Output, Failure> {
    let bundle = load(&args.case)?;
    let network = bundle.network.with_load_scale(|k| bundle.bus_load_scale[k]);
    let ybus = build_ybus(&network).map_err(Failure::input)?;

    let (set, truth) = match &args.measurements {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
            let rows = formats::parse_measurements_csv(&path.display().to_string(), &text)
                .map_err(Failure::input)?;
            (MeasurementSet::new(rows, &network).map_err(Failure::input)?, None)
        }
        None => {
            let pf = truth_for(&bundle, power_flow::DEFAULT_TOL, power_flow::DEFAULT_MAX_ITER)?;
            if !pf.converged {
                return Err(Failure::solver("power flow for the truth state did not converge"));
            }
            let plan = full_measurement_plan(
                &network,
                args.sigmas.sigma_v,
                args.sigmas.sigma_inj,
                args.sigmas.sigma_flow,
            );
            let noise = if args.noise_off { Noise::Off } else { Noise::Gaussian };
            let seed = args.seed.unwrap_or(0);
            let set = generate_measurements(&pf.state, &plan, seed, noise, &network, &ybus)
                .map_err(Failure::input)?;
            (set, Some(pf.state))
        }
    };
    if let Some(path) = &args.write_measurements {
        formats::write_text(path, &formats::render_measurements_csv(set.measurements()))
            .map_err(Failure::input)?;
    }

    let config = EstimatorConfig {
        tol: args.tol,
        max_iter: args.max_iter,
        ..EstimatorConfig::default()
    };
    let res = estimate(&network, &ybus, &set, &config)?;

    #[derive(Serialize)]
    struct EstimateOut<'a> {
        converged: bool,
        iterations: usize,
        objective: f64,
        measurements: usize,
        state_dim: usize,
        degrees_of_freedom: usize,
        buses: Vec<BusState>,
        truth: Option<Vec<BusState>>,
        result: &'a EstimationResult,
    }
    let text = to_json(&EstimateOut {
        converged: res.converged,
        iterations: res.iterations,
        objective: res.objective,
        measurements: set.len(),
        state_dim: network.state_dim(),
        degrees_of_freedom: set.len() - network.state_dim(),
        buses: bus_table(&res.state),
        truth: truth.as_ref().map(bus_table),
        result: &res,
    });
    Ok(Output {
        text,
        converged: res.converged,
    })
}

fn cmd_snapshots(
    case: &Path,
    count: usize,
    load_scale: Vec<f64>,
    seed: u64,
    sigmas: &SigmaArgs,
    noise_off: bool,
    format: Format,
) -> Result<Output, Failure> {
    if count != load_scale.len() {
        return Err(Failure::input(format!(
            "--count is {count} but --load-scale has {} entries",
            load_scale.len()
        )));
    }
    let bundle = load(case)?;
    let mut plan = SnapshotPlan::new(load_scale, seed);
    plan.sigmas = Sigmas {
        v: sigmas.sigma_v,
        inj: sigmas.sigma_inj,
        flow: sigmas.sigma_flow,
    };
    plan.noise = if noise_off { Noise::Off } else { Noise::Gaussian };
    let report = run_snapshots(&bundle, &plan).map_err(Failure::input)?;
    for snap in &report.snapshots {
        if let Some(err) = &snap.error {
            eprintln!("snapshot {}: {err}", snap.index);
        }
    }
    let format = match format {
        Format::Csv => ReportFormat::Csv,
        Format::Json => ReportFormat::Json,
    };
    Ok(Output {
        text: formats::render_report(&report, format),
        converged: report.all_succeeded(),
    })
}

fn load_system(path: &Path) -> Result<(SwitchedSystem, Option<StabilityAdvisory>), Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let cfg: SystemConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    Ok(cfg.build()?)
}

fn cmd_solve(config: &Path) -> Result<Output, Failure> {
    let (system, advisory) = load_system(config)?;
    let qv = solve_quadratic_value(&system)?;
    let cmp = switching_function(&system, &qv)?;
    let vec = |v: &DVector<f64>| v.iter().copied().collect::<Vec<_>>();
    #[derive(Serialize)]
    struct Coeffs {
        delta: Vec<f64>,
        zeta: f64,
    }
    #[derive(Serialize)]
    struct SolveOut {
        p: Vec<Vec<f64>>,
        theta: Vec<f64>,
        v: f64,
        iterations: usize,
        fixed_point_residual: f64,
        switching_function: Coeffs,
        expanded: Coeffs,
        alternate: Coeffs,
        affinity_residual: f64,
        fitted_vs_expanded: f64,
        fitted_vs_alternate: f64,
        discretization: Option<StabilityAdvisory>,
    }
    let coeffs = |f: &crate::controller::SwitchingFunction| Coeffs {
        delta: vec(&f.delta),
        zeta: f.zeta,
    };
    let text = to_json(&SolveOut {
        p: qv.p.row_iter().map(|r| r.iter().copied().collect()).collect(),
        theta: vec(&qv.theta),
        v: qv.v,
        iterations: qv.iterations,
        fixed_point_residual: qv.fixed_point_residual(&system),
        switching_function: coeffs(&cmp.fitted),
        expanded: coeffs(&cmp.expanded),
        alternate: coeffs(&cmp.alternate),
        affinity_residual: cmp.affinity_residual,
        fitted_vs_expanded: cmp.fitted_vs_expanded,
        fitted_vs_alternate: cmp.fitted_vs_alternate,
        discretization: advisory,
    });
    Ok(Output {
        text,
        converged: true,
    })
}

fn cmd_simulate(config: &Path, steps: usize, x0: &[f64], z0: u8) -> Result<Output, Failure> {
    let (system, _) = load_system(config)?;
    let qv = solve_quadratic_value(&system)?;
    let sf = switching_function(&system, &qv)?.fitted;
    let z0 = Switch::from_u8(z0).ok_or_else(|| Failure::input("--z0 must be 0 or 1"))?;
    let sim = simulate(&system, &DVector::from_column_slice(x0), z0, steps, &sf)?;

    let n = system.dim();
    let mut text = String::from("k");
    for d in 1..=n {
        let _ = write!(text, ",x{d}");
    }
    text.push_str(",z,u,cost,y\n");
    for step in &sim.trajectory {
        let _ = write!(text, "{}", step.k);
        for v in step.x.iter() {
            let _ = write!(text, ",{v:?}");
        }
        let y = step.y.map(|y| format!("{y:?}")).unwrap_or_default();
        let _ = writeln!(text, ",{},{},{:?},{}", step.z.as_u8(), step.u.as_u8(), step.cost, y);
    }
    eprintln!(
        "discounted_total={:?} switch_count={}",
        sim.discounted_total, sim.switch_count
    );
    Ok(Output {
        text,
        converged: true,
    })
}

fn cmd_oracle(
    config: &Path,
    bounds: &[f64],
    resolution: usize,
    tol: f64,
    max_sweeps: usize,
    report: Option<&Path>,
) -> Result<Output, Failure> {
    let [lo, hi] = bounds else {
        return Err(Failure::input("--box takes exactly two values: LO,HI"));
    };
    let (system, _) = load_system(config)?;
    let grid = GridSpec::uniform(system.dim(), *lo, *hi, resolution);
    let oracle = bellman_value_iteration(&system, &grid, tol, max_sweeps, Execution::default())?;
    let qv = solve_quadratic_value(&system).ok();

    let n = system.dim();
    let mut text = String::new();
    for d in 1..=n {
        let _ = write!(text, "x{d},");
    }
    text.push_str("v0,v1,v_quadratic\n");
    for idx in 0..grid.len() {
        let x = grid.point(idx);
        for v in x.iter() {
            let _ = write!(text, "{v:?},");
        }
        let vq = qv.as_ref().map(|q| format!("{:?}", q.value(&x))).unwrap_or_default();
        let _ = writeln!(text, "{:?},{:?},{}", oracle.v0[idx], oracle.v1[idx], vq);
    }

    #[derive(Serialize)]
    struct OracleReport {
        sweeps: usize,
        final_residual: f64,
        late_contraction: f64,
        alpha: f64,
        clamped: bool,
        comparison: Option<OracleComparison>,
    }
    let summary = OracleReport {
        sweeps: oracle.sweeps,
        final_residual: oracle.final_residual(),
        late_contraction: oracle.late_contraction(20),
        alpha: system.alpha,
        clamped: oracle.clamped,
        comparison: qv.as_ref().map(|q| oracle.compare(q)),
    };
    let json = to_json(&summary);
    eprint!("{json}");
    if oracle.clamped {
        eprintln!("warning: successor states left the box and were clamped");
    }
    if let Some(path) = report {
        formats::write_text(path, &json).map_err(Failure::input)?;
    }
    Ok(Output {
        text,
        converged: true,
    })
}
