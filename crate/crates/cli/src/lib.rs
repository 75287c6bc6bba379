//! Command implementations behind the `cec-reuse` binary.
//!
//! Every command is a plain function returning an exit code so it can be
//! driven from tests. Exit codes: 0 success, 1 infeasible problem or failed
//! validation, 2 usage, parse or I/O error.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cec_core::delay::{
    d_delay1_d_phr, delay_with_cache, ObjectiveGradient, ObjectiveModel, ServiceRates,
};
use cec_core::experiments::{
    generate_scenario, run_sweep, write_sweep_csv, Axis, GeneratorParams, SweepSpec,
};
use cec_core::queuesim::{simulate, validation_grid, GridPoint, QueueSimConfig};
use cec_core::rng::{family, stream, uniform};
use cec_core::scheduling::{initial_feasible_point, PgdParams};
use cec_core::solver::{solve, TraceEntry};
use cec_core::{
    Algorithm, CacheAssignment, Error, Scenario, SchedulingState, SolveParams, SolveReport,
};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

/// Set to `1` to record solver wall time; otherwise it is reported as 0.
pub const TIMING_ENV: &str = "CEC_REUSE_TIMING";

pub const TRACE_CSV_HEADER: &str = "round,phase,iteration,objective_s";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "cec-reuse",
    version,
    about = "Joint caching and scheduling for collaborative edge computing"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one scenario and write report.json and trace.csv.
    Solve(SolveArgs),
    /// Run a parameter sweep over generated scenarios and write a results CSV.
    Sweep(SweepArgs),
    /// Compare simulated queue delays with the closed forms.
    ValidateQueueing(ValidateArgs),
    /// Compare the analytic objective gradient with finite differences.
    GradientCheck(GradientArgs),
    /// Generate a scenario JSON.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct SolverFlags {
    #[arg(long, default_value_t = 10)]
    pub rounds: usize,
    #[arg(long, default_value_t = 10)]
    pub caching_iters: usize,
    #[arg(long, default_value_t = 10)]
    pub scheduling_iters: usize,
    #[arg(long, default_value_t = 1.0)]
    pub theta0: f64,
}

impl SolverFlags {
    pub fn params(&self) -> SolveParams {
        SolveParams {
            rounds: self.rounds,
            caching_iters: self.caching_iters,
            scheduling_iters: self.scheduling_iters,
            pgd: PgdParams {
                theta0: self.theta0,
                ..PgdParams::default()
            },
            record_wall_time: std::env::var(TIMING_ENV).is_ok_and(|v| v == "1"),
            ..SolveParams::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Scenario JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub output: PathBuf,
    /// Accepted for uniformity; solving draws no random numbers.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value = "proposed")]
    pub algorithm: Algorithm,
    #[command(flatten)]
    pub solver: SolverFlags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Generator parameters JSON; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Results CSV path; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub axis: Axis,
    /// Comma-separated axis values; defaults depend on the axis.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    /// Comma-separated algorithms; all four when omitted.
    #[arg(long, value_delimiter = ',')]
    pub algorithm: Vec<Algorithm>,
    #[command(flatten)]
    pub solver: SolverFlags,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// JSON array of queue configurations replacing the standard grid.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Where to write the results as JSON.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradientArgs {
    /// Scenario JSON; a generated default scenario when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Generator parameters JSON; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scenario JSON path; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Command failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Infeasible(_)
            | Error::StabilityViolation { .. }
            | Error::UnstableConfig { .. }
            | Error::LineSearchExhausted(_) => EXIT_FAILED,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: format!("{}: {e}", path.display()),
    }
}

type CmdResult = std::result::Result<i32, Failure>;

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> std::result::Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_failure(path, e))
}

fn write_text(
    path: Option<&Path>,
    text: &str,
    out: &mut dyn Write,
) -> std::result::Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| io_failure(p, e)),
        None => out.write_all(text.as_bytes()).map_err(|e| Failure {
            code: EXIT_USAGE,
            message: e.to_string(),
        }),
    }
}

fn generator_params(
    config: Option<&Path>,
    seed: Option<u64>,
) -> std::result::Result<GeneratorParams, Failure> {
    let mut params = match config {
        Some(p) => read_json(p)?,
        None => GeneratorParams::default(),
    };
    if let Some(s) = seed {
        params.seed = s;
    }
    Ok(params)
}

/// Trace rows as CSV with [`TRACE_CSV_HEADER`].
pub fn trace_csv(trace: &[TraceEntry]) -> String {
    let mut s = String::from(TRACE_CSV_HEADER);
    s.push('\n');
    for t in trace {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            t.round, t.phase, t.iteration, t.objective_s
        );
    }
    s
}

pub fn cmd_solve(args: &SolveArgs, out: &mut dyn Write) -> CmdResult {
    let scenario = Scenario::from_path(&args.config).map_err(|e| io_failure(&args.config, e))?;
    let report = solve(&scenario, args.algorithm, &args.solver.params())?;
    fs::create_dir_all(&args.output).map_err(|e| io_failure(&args.output, e))?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::from(Error::from(e)))?;
    let report_path = args.output.join("report.json");
    fs::write(&report_path, json).map_err(|e| io_failure(&report_path, e))?;
    let trace_path = args.output.join("trace.csv");
    fs::write(&trace_path, trace_csv(&report.trace)).map_err(|e| io_failure(&trace_path, e))?;
    let _ = writeln!(
        out,
        "{}: objective {} s after {} rounds",
        report.algorithm, report.objective, report.rounds_completed
    );
    Ok(EXIT_OK)
}

fn default_values(axis: Axis) -> Vec<f64> {
    match axis {
        Axis::Workload => vec![0.5, 0.75, 1.0, 1.25, 1.5],
        Axis::Stations => vec![5.0, 10.0, 15.0, 20.0],
        Axis::Apps => vec![2.0, 5.0, 8.0],
    }
}

pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write) -> CmdResult {
    let base = generator_params(args.config.as_deref(), args.seed)?;
    let spec = SweepSpec {
        axis: args.axis,
        values: if args.values.is_empty() {
            default_values(args.axis)
        } else {
            args.values.clone()
        },
        repetitions: args.reps,
        algorithms: if args.algorithm.is_empty() {
            Algorithm::ALL.to_vec()
        } else {
            args.algorithm.clone()
        },
    };
    let rows = run_sweep(&spec, &base, &args.solver.params())?;
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf)?;
    let text = String::from_utf8(buf).expect("csv output is utf-8");
    write_text(args.output.as_deref(), &text, out)?;
    Ok(EXIT_OK)
}

/// Outcome of one queue validation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueCheck {
    pub config: QueueSimConfig,
    pub simulated_s: Option<f64>,
    pub half_width_s: Option<f64>,
    pub analytic_s: Option<f64>,
    pub relative_error: Option<f64>,
    pub passed: bool,
}

/// Largest relative error accepted by `validate-queueing`.
pub const QUEUE_TOLERANCE: f64 = 0.02;

pub fn check_queue(config: &QueueSimConfig) -> QueueCheck {
    let outcome = config
        .analytic_mean()
        .and_then(|analytic| simulate(config).map(|sim| (analytic, sim)));
    match outcome {
        Ok((analytic, sim)) => {
            let err = (sim.mean_sojourn - analytic).abs() / analytic;
            QueueCheck {
                config: *config,
                simulated_s: Some(sim.mean_sojourn),
                half_width_s: Some(sim.half_width_95),
                analytic_s: Some(analytic),
                relative_error: Some(err),
                passed: err < QUEUE_TOLERANCE,
            }
        }
        Err(_) => QueueCheck {
            config: *config,
            simulated_s: None,
            half_width_s: None,
            analytic_s: None,
            relative_error: None,
            passed: false,
        },
    }
}

pub fn cmd_validate_queueing(args: &ValidateArgs, out: &mut dyn Write) -> CmdResult {
    let configs: Vec<QueueSimConfig> = match &args.config {
        Some(p) => read_json(p)?,
        None => validation_grid(args.seed, 1_000_000)
            .into_iter()
            .map(|g: GridPoint| g.config)
            .collect(),
    };
    let checks: Vec<QueueCheck> = configs.iter().map(check_queue).collect();
    let mut table = String::from(
        "mode        lambda      hit   simulated_s    analytic_s    rel_error  status\n",
    );
    for c in &checks {
        let num = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        let _ = writeln!(
            table,
            "{:<10} {:>8.4} {:>6.3} {:>13} {:>13} {:>12} {}",
            format!("{:?}", c.config.mode),
            c.config.arrival_rate,
            c.config.hit_rate,
            num(c.simulated_s),
            num(c.analytic_s),
            c.relative_error
                .map_or("-".to_string(), |e| format!("{e:.3e}")),
            match (c.passed, c.relative_error) {
                (true, _) => "PASS",
                (false, Some(_)) => "FAIL",
                (false, None) => "UNSTABLE",
            }
        );
    }
    let _ = out.write_all(table.as_bytes());
    if let Some(p) = &args.output {
        let json =
            serde_json::to_string_pretty(&checks).map_err(|e| Failure::from(Error::from(e)))?;
        fs::write(p, json).map_err(|e| io_failure(p, e))?;
    }
    Ok(if checks.iter().all(|c| c.passed) {
        EXIT_OK
    } else {
        EXIT_FAILED
    })
}

/// Summary of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub points: usize,
    pub step: f64,
    pub max_relative_error: f64,
    /// Largest relative error of the hit-rate derivative of the cache-search delay.
    pub max_hit_derivative_error: f64,
    pub passed: bool,
}

pub const GRADIENT_TOLERANCE: f64 = 1e-5;
pub const HIT_DERIVATIVE_TOLERANCE: f64 = 1e-6;
const FD_STEP: f64 = 1e-6;
const LOAD_CAP: f64 = 0.9;
const KINK_GAP: f64 = 1e-4;

/// Random binary cache with each input cached with probability `share`.
fn random_cache(scenario: &Scenario, seed: u64, share: f64) -> CacheAssignment {
    let mut rng = stream(seed, family::GRADIENT_CHECK, 0);
    let mut cache = CacheAssignment::empty(scenario);
    for row in cache.x.iter_mut() {
        for items in row.iter_mut() {
            for v in items.iter_mut() {
                *v = if uniform(&mut rng, 0.0, 1.0) < share {
                    1.0
                } else {
                    0.0
                };
            }
        }
    }
    cache
}

fn normalized(xs: Vec<f64>) -> Vec<f64> {
    let sum: f64 = xs.iter().sum();
    xs.into_iter().map(|x| x / sum).collect()
}

/// True when every pair sits at most `LOAD_CAP` of its branch rate, off the
/// transfer-term kink, with positive CPU.
fn well_inside(model: &ObjectiveModel<'_>, sched: &SchedulingState) -> bool {
    let sc = model.scenario;
    (0..sc.num_apps()).all(|a| {
        let total = sc.total_arrival_rate(a);
        (0..sc.num_stations()).all(|n| {
            let cpu = sched.cpu_hz(sc, a, n);
            let rates = ServiceRates::new(
                cpu,
                sc.apps[a].mean_workload_cycles,
                sc.search_workload_cycles,
                model.hits.total[a],
            );
            let rate = if sched.search[a][n] {
                rates.mu1
            } else {
                rates.mu0
            };
            let load = sched.lambda[a][n] * total;
            cpu > 0.0
                && load <= LOAD_CAP * rate
                && (load - sc.stations[n].arrival_rates[a]).abs() > KINK_GAP * total
        })
    })
}

/// Draws a feasible point by jittering the capacity-proportional start.
fn random_point(
    model: &ObjectiveModel<'_>,
    start: &SchedulingState,
    rng: &mut cec_core::rng::StreamRng,
) -> Option<SchedulingState> {
    for _ in 0..10_000 {
        let mut s = start.clone();
        for row in s.lambda.iter_mut() {
            *row = normalized(row.iter().map(|l| l * uniform(rng, 0.5, 1.5)).collect());
        }
        let stations = s.cpu_share.first().map_or(0, Vec::len);
        for n in 0..stations {
            let column = normalized(
                s.cpu_share
                    .iter()
                    .map(|r| r[n] * uniform(rng, 0.5, 1.5))
                    .collect(),
            );
            for (a, v) in column.into_iter().enumerate() {
                s.cpu_share[a][n] = v;
            }
        }
        model.select_search(&mut s);
        if well_inside(model, &s) {
            return Some(s);
        }
    }
    None
}

fn relative(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference check of the objective gradient at `points` random
/// feasible points, plus a check of the hit-rate derivative of the
/// cache-search delay. `tamper` may alter each analytic gradient before it is
/// compared, which lets tests confirm that a wrong gradient is caught.
pub fn gradient_check(
    scenario: &Scenario,
    seed: u64,
    points: usize,
    tamper: impl Fn(&mut ObjectiveGradient),
) -> Result<GradientReport, Error> {
    let cache = random_cache(scenario, seed, 0.3);
    let model = ObjectiveModel::new(scenario, &cache)?;
    let start = initial_feasible_point(scenario, &cache, 0.0)?;
    let mut rng = stream(seed, family::GRADIENT_CHECK, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let point = random_point(&model, &start, &mut rng)
            .ok_or_else(|| Error::Infeasible("no well-conditioned feasible point found".into()))?;
        let mut g = model.gradient(&point)?;
        tamper(&mut g);
        let eval = |s: &SchedulingState| model.objective_frozen(s);
        for a in 0..scenario.num_apps() {
            for n in 0..scenario.num_stations() {
                for which in 0..2 {
                    let mut plus = point.clone();
                    let mut minus = point.clone();
                    let (p, m, analytic) = if which == 0 {
                        (
                            &mut plus.lambda[a][n],
                            &mut minus.lambda[a][n],
                            g.lambda[a][n],
                        )
                    } else {
                        (
                            &mut plus.cpu_share[a][n],
                            &mut minus.cpu_share[a][n],
                            g.cpu_share[a][n],
                        )
                    };
                    *p += FD_STEP;
                    *m -= FD_STEP;
                    let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
                    worst = worst.max(relative(analytic, numeric));
                }
            }
        }
    }

    let mut rng = stream(seed, family::GRADIENT_CHECK, 2);
    let mut hit_worst: f64 = 0.0;
    for _ in 0..points {
        let cpu = uniform(&mut rng, 1e9, 8e9);
        let workload = uniform(&mut rng, 2e8, 6e8);
        let search = uniform(&mut rng, 1e7, 5e7);
        let hit = uniform(&mut rng, 0.05, 0.9);
        let mu1 = ServiceRates::new(cpu, workload, search, hit).mu1;
        let load = uniform(&mut rng, 0.1, LOAD_CAP) * mu1;
        let d = |p: f64| delay_with_cache(load, ServiceRates::new(cpu, workload, search, p), p);
        let numeric = (d(hit + FD_STEP)? - d(hit - FD_STEP)?) / (2.0 * FD_STEP);
        let analytic = d_delay1_d_phr(load, cpu, workload, search, hit)?;
        hit_worst = hit_worst.max(relative(analytic, numeric));
    }
    Ok(GradientReport {
        points,
        step: FD_STEP,
        max_relative_error: worst,
        max_hit_derivative_error: hit_worst,
        passed: worst < GRADIENT_TOLERANCE && hit_worst < HIT_DERIVATIVE_TOLERANCE,
    })
}

pub fn cmd_gradient_check(args: &GradientArgs, out: &mut dyn Write) -> CmdResult {
    let scenario = match &args.config {
        Some(p) => Scenario::from_path(p).map_err(|e| io_failure(p, e))?,
        None => generate_scenario(&GeneratorParams {
            seed: args.seed,
            ..GeneratorParams::default()
        })?,
    };
    let report = gradient_check(&scenario, args.seed, 100, |_| {})?;
    let _ = writeln!(
        out,
        "points {}  max relative error {:.3e} (limit {:.0e})  hit-rate derivative {:.3e} (limit {:.0e})  {}",
        report.points,
        report.max_relative_error,
        GRADIENT_TOLERANCE,
        report.max_hit_derivative_error,
        HIT_DERIVATIVE_TOLERANCE,
        if report.passed { "PASS" } else { "FAIL" }
    );
    if let Some(p) = &args.output {
        let json =
            serde_json::to_string_pretty(&report).map_err(|e| Failure::from(Error::from(e)))?;
        fs::write(p, json).map_err(|e| io_failure(p, e))?;
    }
    Ok(if report.passed { EXIT_OK } else { EXIT_FAILED })
}

pub fn cmd_generate(args: &GenerateArgs, out: &mut dyn Write) -> CmdResult {
    let params = generator_params(args.config.as_deref(), args.seed)?;
    let scenario = generate_scenario(&params)?;
    let mut text = scenario.to_json_string()?;
    text.push('\n');
    write_text(args.output.as_deref(), &text, out)?;
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let sink: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    let result = match &cli.command {
        Command::Solve(a) => cmd_solve(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::ValidateQueueing(a) => cmd_validate_queueing(a, out),
        Command::GradientCheck(a) => cmd_gradient_check(a, out),
        Command::Generate(a) => cmd_generate(a, out),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

/// Loads a report written by `solve`, for warm starts.
pub fn load_report(path: &Path) -> std::result::Result<SolveReport, Failure> {
    read_json(path)
}
