//! Alternating minimization over caching and scheduling, and the three
//! baselines it is compared against.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::caching::{sweep_all_stations, CachingParams};
use crate::delay::ObjectiveModel;
use crate::error::{Error, Result};
use crate::model::{CacheAssignment, CacheMode, Scenario, SchedulingState};
use crate::scheduling::{initial_feasible_point, solve_scheduling, PgdParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Proposed,
    Noc,
    Nor,
    Greedy,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Proposed,
        Algorithm::Noc,
        Algorithm::Nor,
        Algorithm::Greedy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Proposed => "proposed",
            Algorithm::Noc => "noc",
            Algorithm::Nor => "nor",
            Algorithm::Greedy => "greedy",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveParams {
    pub rounds: usize,
    /// Caching passes over all stations per round.
    pub caching_iters: usize,
    /// PGD iterations per round.
    pub scheduling_iters: usize,
    pub pgd: PgdParams,
    pub caching: CachingParams,
    /// Stop once a round improves the objective by less than this fraction.
    pub early_stop: f64,
    /// Measure wall time; off by default so reports are reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for SolveParams {
    fn default() -> Self {
        SolveParams {
            rounds: 10,
            caching_iters: 10,
            scheduling_iters: 10,
            pgd: PgdParams::default(),
            caching: CachingParams::default(),
            early_stop: 1e-6,
            record_wall_time: false,
        }
    }
}

impl SolveParams {
    fn pgd(&self) -> PgdParams {
        PgdParams {
            outer_iterations: self.scheduling_iters,
            ..self.pgd
        }
    }

    fn caching(&self) -> CachingParams {
        CachingParams {
            stability_margin: self.pgd.stability_margin,
            ..self.caching
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Caching,
    Scheduling,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Init => "init",
            Phase::Caching => "caching",
            Phase::Scheduling => "scheduling",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub round: usize,
    pub phase: Phase,
    pub iteration: usize,
    pub objective_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub algorithm: Algorithm,
    /// Weighted objective in seconds. For NoC, the sum over stations.
    pub objective: f64,
    pub trace: Vec<TraceEntry>,
    pub cache: CacheAssignment,
    pub sched: SchedulingState,
    pub rounds_completed: usize,
    pub wall_time_s: f64,
    /// Per-station objectives for NoC; empty otherwise.
    #[serde(default)]
    pub station_objectives: Vec<f64>,
}

impl SolveReport {
    pub fn objectives(&self) -> Vec<f64> {
        self.trace.iter().map(|t| t.objective_s).collect()
    }
}

fn objective_of(
    scenario: &Scenario,
    cache: &CacheAssignment,
    sched: &SchedulingState,
    margin: f64,
) -> Result<(f64, SchedulingState)> {
    ObjectiveModel::new(scenario, cache)?
        .with_margin(margin)
        .objective(sched)
}

/// Each station caches inputs by descending `p/s` across all apps (ties by
/// app then input index) and stops at the first input that does not fit.
pub fn greedy_cache(scenario: &Scenario) -> CacheAssignment {
    let mut cache = CacheAssignment::empty(scenario);
    let mut items: Vec<(usize, usize, f64, f64)> = scenario
        .apps
        .iter()
        .enumerate()
        .flat_map(|(a, app)| {
            app.typical_inputs.iter().enumerate().map(move |(k, i)| {
                (
                    a,
                    k,
                    i.match_prob / i.result_size_bytes,
                    i.result_size_bytes,
                )
            })
        })
        .collect();
    items.sort_by(|x, y| {
        y.2.partial_cmp(&x.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((x.0, x.1).cmp(&(y.0, y.1)))
    });
    for (n, st) in scenario.stations.iter().enumerate() {
        let mut left = st.storage_capacity_bytes;
        for &(a, k, _, size) in &items {
            if size > left {
                break;
            }
            cache.x[n][a][k] = 1.0;
            left -= size;
        }
    }
    cache
}

struct Clock(Option<Instant>);

impl Clock {
    fn start(enabled: bool) -> Self {
        Clock(enabled.then(Instant::now))
    }

    fn seconds(&self) -> f64 {
        self.0.map_or(0.0, |t| t.elapsed().as_secs_f64())
    }
}

/// Greedy caching with capacity-proportional workload and an even CPU split.
pub fn solve_greedy(scenario: &Scenario, params: &SolveParams) -> Result<SolveReport> {
    let clock = Clock::start(params.record_wall_time);
    let cache = greedy_cache(scenario);
    let margin = params.pgd.stability_margin;
    let sched = initial_feasible_point(scenario, &cache, margin)?;
    let (objective, sched) = objective_of(scenario, &cache, &sched, margin)?;
    Ok(SolveReport {
        algorithm: Algorithm::Greedy,
        objective,
        trace: vec![TraceEntry {
            round: 0,
            phase: Phase::Init,
            iteration: 0,
            objective_s: objective,
        }],
        cache,
        sched,
        rounds_completed: 0,
        wall_time_s: clock.seconds(),
        station_objectives: Vec::new(),
    })
}

/// Alternating minimization started from the Greedy state.
pub fn alternating_solve(scenario: &Scenario, params: &SolveParams) -> Result<SolveReport> {
    let clock = Clock::start(params.record_wall_time);
    let start = solve_greedy(scenario, params)?;
    let mut report = alternate(scenario, start.cache, start.sched, params, true)?;
    report.wall_time_s = clock.seconds();
    Ok(report)
}

/// Alternating minimization from a given state, e.g. a previous report.
pub fn alternating_solve_from(
    scenario: &Scenario,
    cache: &CacheAssignment,
    sched: &SchedulingState,
    params: &SolveParams,
) -> Result<SolveReport> {
    let clock = Clock::start(params.record_wall_time);
    cache.check_dimensions(scenario)?;
    sched.check_dimensions(scenario)?;
    let mut report = alternate(scenario, cache.clone(), sched.clone(), params, true)?;
    report.wall_time_s = clock.seconds();
    Ok(report)
}

fn alternate(
    scenario: &Scenario,
    cache: CacheAssignment,
    sched: SchedulingState,
    params: &SolveParams,
    with_caching: bool,
) -> Result<SolveReport> {
    let margin = params.pgd.stability_margin;
    let (mut objective, mut sched) = objective_of(scenario, &cache, &sched, margin)?;
    let mut cache = cache;
    let mut trace = vec![TraceEntry {
        round: 0,
        phase: Phase::Init,
        iteration: 0,
        objective_s: objective,
    }];
    let pgd = params.pgd();
    let caching = params.caching();
    let mut rounds_completed = 0;
    for round in 1..=params.rounds {
        let before = objective;
        if with_caching && params.caching_iters > 0 {
            let sweep =
                sweep_all_stations(scenario, &cache, &sched, &caching, params.caching_iters)?;
            for (i, value) in sweep.pass_objectives.iter().enumerate() {
                trace.push(TraceEntry {
                    round,
                    phase: Phase::Caching,
                    iteration: i + 1,
                    objective_s: *value,
                });
            }
            cache = sweep.cache;
            sched = sweep.sched;
        }
        let outcome = solve_scheduling(scenario, &cache, &sched, &pgd)?;
        for it in &outcome.trace {
            trace.push(TraceEntry {
                round,
                phase: Phase::Scheduling,
                iteration: it.iteration,
                objective_s: it.objective_s,
            });
        }
        sched = outcome.sched;
        objective = outcome.objective;
        rounds_completed = round;
        if before - objective < params.early_stop * before.abs() {
            break;
        }
    }
    Ok(SolveReport {
        algorithm: if with_caching {
            Algorithm::Proposed
        } else {
            Algorithm::Nor
        },
        objective,
        trace,
        cache,
        sched,
        rounds_completed,
        wall_time_s: 0.0,
        station_objectives: Vec::new(),
    })
}

/// Collaboration without reuse: nothing cached, nothing searched, scheduling only.
pub fn solve_nor(scenario: &Scenario, params: &SolveParams) -> Result<SolveReport> {
    let clock = Clock::start(params.record_wall_time);
    let cache = CacheAssignment::empty(scenario);
    let mut sched = initial_feasible_point(scenario, &cache, params.pgd.stability_margin)?;
    for row in sched.search.iter_mut() {
        row.fill(false);
    }
    let mut report = alternate(scenario, cache, sched, params, false)?;
    report.wall_time_s = clock.seconds();
    Ok(report)
}

/// Every station on its own: local tasks only, local cache only.
///
/// The reported objective is the sum of the per-station objectives.
pub fn solve_noc(scenario: &Scenario, params: &SolveParams) -> Result<SolveReport> {
    let clock = Clock::start(params.record_wall_time);
    let mut cache = CacheAssignment::empty(scenario);
    cache.mode = CacheMode::Binary;
    let mut sched = SchedulingState::proportional(scenario);
    let mut parts = Vec::with_capacity(scenario.num_stations());
    for n in 0..scenario.num_stations() {
        let local = scenario.isolate_station(n);
        let part = alternating_solve(&local, params).map_err(|e| match e {
            Error::Infeasible(msg) => Error::Infeasible(format!("station {n}: {msg}")),
            other => other,
        })?;
        cache.x[n] = part.cache.x[0].clone();
        for a in 0..scenario.num_apps() {
            let total = scenario.total_arrival_rate(a);
            sched.lambda[a][n] = if total > 0.0 {
                scenario.stations[n].arrival_rates[a] / total
            } else {
                1.0 / scenario.num_stations() as f64
            };
            sched.cpu_share[a][n] = part.sched.cpu_share[a][0];
            sched.search[a][n] = part.sched.search[a][0];
        }
        parts.push(part);
    }
    let longest = parts
        .iter()
        .max_by_key(|p| p.trace.len())
        .map(|p| p.trace.clone())
        .unwrap_or_default();
    let trace = longest
        .iter()
        .enumerate()
        .map(|(i, entry)| TraceEntry {
            objective_s: parts
                .iter()
                .map(|p| {
                    p.trace
                        .get(i)
                        .unwrap_or(p.trace.last().expect("non-empty"))
                        .objective_s
                })
                .sum(),
            ..*entry
        })
        .collect();
    let station_objectives: Vec<f64> = parts.iter().map(|p| p.objective).collect();
    Ok(SolveReport {
        algorithm: Algorithm::Noc,
        objective: station_objectives.iter().sum(),
        trace,
        cache,
        sched,
        rounds_completed: parts.iter().map(|p| p.rounds_completed).max().unwrap_or(0),
        wall_time_s: clock.seconds(),
        station_objectives,
    })
}

pub fn solve(
    scenario: &Scenario,
    algorithm: Algorithm,
    params: &SolveParams,
) -> Result<SolveReport> {
    match algorithm {
        Algorithm::Proposed => alternating_solve(scenario, params),
        Algorithm::Noc => solve_noc(scenario, params),
        Algorithm::Nor => solve_nor(scenario, params),
        Algorithm::Greedy => solve_greedy(scenario, params),
    }
}
