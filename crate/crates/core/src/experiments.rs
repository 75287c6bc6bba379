//! Seeded scenario generation and parameter sweeps.
//!
//! Every random quantity is drawn from its own stream keyed by station, app or
//! (station, app), so growing the network or the app set leaves the draws of
//! existing stations and apps unchanged.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Application, BaseStation, Scenario, TypicalInput};
use crate::rng::{family, pair_index, stream, uniform};
use crate::solver::{solve, Algorithm, SolveParams};

/// Environment variable capping the number of sweep worker threads.
pub const THREADS_ENV: &str = "CEC_REUSE_THREADS";

/// Exact header of the sweep results CSV.
pub const SWEEP_CSV_HEADER: &str =
    "axis,value,repetition,algorithm,total_delay_s,avg_delay_s,feasible,rounds,wall_time_s";

/// Closed interval for a uniform draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn scaled(self, factor: f64) -> Self {
        Range::new(self.lo * factor, self.hi * factor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorParams {
    pub seed: u64,
    pub stations: usize,
    pub apps: usize,
    pub compute_hz: Range,
    /// Storage before `k_scale` is applied.
    pub storage_bytes: Range,
    /// Number of typical inputs per app before `k_scale` is applied.
    pub inputs_per_app: Range,
    pub workload_cycles: Range,
    pub search_cycles: f64,
    pub arrival_rate: Range,
    /// Match probability before division by `k_scale`.
    pub match_prob: Range,
    pub transfer_delay_s: Range,
    pub weight: f64,
    pub result_size_mean: f64,
    pub result_size_sd: f64,
    pub result_size_floor: f64,
    /// Cap on the summed match probability of one app.
    pub max_total_match: f64,
    pub workload_factor: f64,
    /// Shrinks input counts and storage, and grows match probabilities, by this factor.
    pub k_scale: f64,
    /// When set, each station's arrival rates are rescaled so their sum equals
    /// what the first `n` apps would have produced.
    pub reference_apps: Option<usize>,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            seed: 42,
            stations: 10,
            apps: 5,
            compute_hz: Range::new(2e9, 8e9),
            storage_bytes: Range::new(2e9, 8e9),
            inputs_per_app: Range::new(10_000.0, 50_000.0),
            workload_cycles: Range::new(2e8, 6e8),
            search_cycles: 25e6,
            arrival_rate: Range::new(0.5, 1.5),
            match_prob: Range::new(1.2e-5, 3.6e-5),
            transfer_delay_s: Range::new(0.01, 0.03),
            weight: 1.0,
            result_size_mean: 1e5,
            result_size_sd: 3e4,
            result_size_floor: 1e4,
            max_total_match: 0.95,
            workload_factor: 1.0,
            k_scale: 0.01,
            reference_apps: None,
        }
    }
}

impl GeneratorParams {
    pub fn check(&self) -> Result<()> {
        let ranges = [
            ("compute_hz", self.compute_hz),
            ("storage_bytes", self.storage_bytes),
            ("inputs_per_app", self.inputs_per_app),
            ("workload_cycles", self.workload_cycles),
            ("arrival_rate", self.arrival_rate),
            ("match_prob", self.match_prob),
            ("transfer_delay_s", self.transfer_delay_s),
        ];
        for (name, r) in ranges {
            if !(r.lo <= r.hi) || r.lo < 0.0 {
                return Err(Error::InvalidScenario(format!(
                    "{name}: bad bounds [{}, {}]",
                    r.lo, r.hi
                )));
            }
        }
        if self.stations == 0 || self.apps == 0 {
            return Err(Error::InvalidScenario(
                "need at least one station and one app".into(),
            ));
        }
        if !(self.workload_factor > 0.0 && self.k_scale > 0.0) {
            return Err(Error::InvalidScenario("factors must be positive".into()));
        }
        if !(self.result_size_sd >= 0.0 && self.result_size_floor > 0.0) {
            return Err(Error::InvalidScenario(
                "bad result size distribution".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.max_total_match) {
            return Err(Error::InvalidScenario(
                "max_total_match must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

fn station_draw(params: &GeneratorParams, n: usize) -> (f64, f64, f64) {
    let mut rng = stream(params.seed, family::STATION, n as u64);
    let compute = uniform(&mut rng, params.compute_hz.lo, params.compute_hz.hi);
    let storage =
        uniform(&mut rng, params.storage_bytes.lo, params.storage_bytes.hi) * params.k_scale;
    let transfer = uniform(
        &mut rng,
        params.transfer_delay_s.lo,
        params.transfer_delay_s.hi,
    );
    (compute, storage, transfer)
}

fn arrival_draw(params: &GeneratorParams, n: usize, a: usize) -> f64 {
    let mut rng = stream(params.seed, family::ARRIVALS, pair_index(n, a));
    uniform(&mut rng, params.arrival_rate.lo, params.arrival_rate.hi) * params.workload_factor
}

fn app_draw(params: &GeneratorParams, a: usize) -> Result<Application> {
    let mut rng = stream(params.seed, family::APP, a as u64);
    let workload = uniform(
        &mut rng,
        params.workload_cycles.lo,
        params.workload_cycles.hi,
    );
    let count_range = params.inputs_per_app.scaled(params.k_scale);
    let count = uniform(&mut rng, count_range.lo, count_range.hi).round() as usize;

    let mut rng = stream(params.seed, family::INPUTS, a as u64);
    let probs = params.match_prob.scaled(1.0 / params.k_scale);
    let size = Normal::new(params.result_size_mean, params.result_size_sd)
        .map_err(|e| Error::InvalidScenario(e.to_string()))?;
    let mut inputs: Vec<TypicalInput> = (0..count)
        .map(|_| {
            let p = uniform(&mut rng, probs.lo, probs.hi);
            let s = size.sample(&mut rng).max(params.result_size_floor);
            TypicalInput {
                match_prob: p,
                result_size_bytes: s,
            }
        })
        .collect();
    let total: f64 = inputs.iter().map(|i| i.match_prob).sum();
    if total > params.max_total_match {
        let shrink = params.max_total_match / total;
        for i in &mut inputs {
            i.match_prob *= shrink;
        }
    }
    Ok(Application {
        weight: params.weight,
        mean_workload_cycles: workload,
        typical_inputs: inputs,
    })
}

/// Draws a scenario from the configured distributions.
pub fn generate_scenario(params: &GeneratorParams) -> Result<Scenario> {
    params.check()?;
    let apps = (0..params.apps)
        .map(|a| app_draw(params, a))
        .collect::<Result<Vec<_>>>()?;
    let stations = (0..params.stations)
        .map(|n| {
            let (compute, storage, transfer) = station_draw(params, n);
            let mut rates: Vec<f64> = (0..params.apps)
                .map(|a| arrival_draw(params, n, a))
                .collect();
            if let Some(reference) = params.reference_apps {
                let target: f64 = (0..reference).map(|a| arrival_draw(params, n, a)).sum();
                let current: f64 = rates.iter().sum();
                if current > 0.0 {
                    for r in &mut rates {
                        *r *= target / current;
                    }
                }
            }
            BaseStation {
                compute_capacity_hz: compute,
                storage_capacity_bytes: storage,
                transfer_delay_s: transfer,
                arrival_rates: rates,
            }
        })
        .collect();
    Scenario::new(params.search_cycles, stations, apps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Workload,
    Stations,
    Apps,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Workload => "workload",
            Axis::Stations => "stations",
            Axis::Apps => "apps",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Axis::Workload, Axis::Stations, Axis::Apps]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown axis {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub repetitions: usize,
    pub algorithms: Vec<Algorithm>,
}

impl SweepSpec {
    pub fn check(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidScenario(
                "sweep needs at least one value".into(),
            ));
        }
        if self.repetitions == 0 || self.algorithms.is_empty() {
            return Err(Error::InvalidScenario(
                "sweep needs at least one repetition and one algorithm".into(),
            ));
        }
        for &v in &self.values {
            let count_axis = matches!(self.axis, Axis::Stations | Axis::Apps);
            if !(v > 0.0) || (count_axis && v.fract() != 0.0) {
                return Err(Error::InvalidScenario(format!(
                    "bad {} value {v}",
                    self.axis
                )));
            }
        }
        Ok(())
    }

    /// Generator parameters for one cell.
    pub fn cell_params(
        &self,
        base: &GeneratorParams,
        value: f64,
        repetition: usize,
    ) -> GeneratorParams {
        let mut p = *base;
        p.seed = base.seed.wrapping_add(repetition as u64);
        match self.axis {
            Axis::Workload => p.workload_factor = base.workload_factor * value,
            Axis::Stations => p.stations = value as usize,
            Axis::Apps => {
                p.apps = value as usize;
                p.reference_apps = Some(base.apps);
            }
        }
        p
    }
}

/// One (value, repetition, algorithm) cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: Axis,
    pub value: f64,
    pub repetition: usize,
    pub algorithm: Algorithm,
    pub total_delay_s: Option<f64>,
    pub avg_delay_s: Option<f64>,
    pub feasible: bool,
    pub rounds: usize,
    pub wall_time_s: f64,
}

fn run_cell(
    spec: &SweepSpec,
    base: &GeneratorParams,
    solve_params: &SolveParams,
    value: f64,
    repetition: usize,
) -> Result<Vec<SweepRow>> {
    let scenario = generate_scenario(&spec.cell_params(base, value, repetition))?;
    let stations = scenario.num_stations() as f64;
    spec.algorithms
        .iter()
        .map(|&algorithm| {
            let row = |total: Option<f64>, rounds: usize, wall: f64| SweepRow {
                axis: spec.axis,
                value,
                repetition,
                algorithm,
                total_delay_s: total,
                avg_delay_s: total.map(|t| t / stations),
                feasible: total.is_some(),
                rounds,
                wall_time_s: wall,
            };
            match solve(&scenario, algorithm, solve_params) {
                Ok(report) => Ok(row(
                    Some(report.objective),
                    report.rounds_completed,
                    report.wall_time_s,
                )),
                Err(Error::Infeasible(_) | Error::StabilityViolation { .. }) => {
                    Ok(row(None, 0, 0.0))
                }
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Worker count from [`THREADS_ENV`], if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
}

/// Runs every cell of a sweep. Rows are ordered by value, repetition, then
/// the order of `spec.algorithms`, whatever the thread count.
pub fn run_sweep(
    spec: &SweepSpec,
    base: &GeneratorParams,
    solve_params: &SolveParams,
) -> Result<Vec<SweepRow>> {
    spec.check()?;
    base.check()?;
    let cells: Vec<(f64, usize)> = spec
        .values
        .iter()
        .flat_map(|&v| (0..spec.repetitions).map(move |r| (v, r)))
        .collect();
    let work = || -> Result<Vec<SweepRow>> {
        let parts = cells
            .par_iter()
            .map(|&(v, r)| run_cell(spec, base, solve_params, v, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.into_iter().flatten().collect())
    };
    match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Io(e.to_string()))?
            .install(work),
        None => work(),
    }
}

/// Writes sweep rows as CSV with [`SWEEP_CSV_HEADER`]; infeasible cells leave delays empty.
pub fn write_sweep_csv(rows: &[SweepRow], out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(SWEEP_CSV_HEADER.split(','))?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        w.write_record([
            r.axis.to_string(),
            r.value.to_string(),
            r.repetition.to_string(),
            r.algorithm.to_string(),
            opt(r.total_delay_s),
            opt(r.avg_delay_s),
            r.feasible.to_string(),
            r.rounds.to_string(),
            r.wall_time_s.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Median of the feasible values of `metric` for one (value, algorithm) point.
pub fn median(
    rows: &[SweepRow],
    value: f64,
    algorithm: Algorithm,
    metric: impl Fn(&SweepRow) -> Option<f64>,
) -> Option<f64> {
    let mut xs: Vec<f64> = rows
        .iter()
        .filter(|r| r.value == value && r.algorithm == algorithm)
        .filter_map(metric)
        .collect();
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    let m = xs.len() / 2;
    Some(if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    })
}
