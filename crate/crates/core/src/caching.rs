//! Cache placement at one station with every other decision frozen.
//!
//! Caching a result changes the objective only through hit rates. The
//! marginal objective change per byte granted to an input is its *storage
//! efficiency* (seconds per byte, negative where caching helps). An optimal
//! relaxed placement admits a level `B*` such that inputs with efficiency
//! below it are fully cached, inputs above it are not cached, and at most one
//! input per app sits fractionally at the level. Storage used grows with the
//! level, so [`solve_caching_bs`] bisects on it; [`EfficiencyContext::assignment_at`]
//! maps a level to the matching placement.
//!
//! Inputs fall into two classes per app: those already cached at some other
//! station (their efficiency is a constant transfer saving) and those cached
//! nowhere else (efficiency is `p/s` times a factor shared by the whole app,
//! so their order is fixed by `p/s`).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::delay::{d_delay1_d_phr, ObjectiveModel};
use crate::error::{Error, Result};
use crate::model::{compute_hit_rates, CacheAssignment, CacheMode, Scenario, SchedulingState};

/// Largest number of items [`brute_force_cache_oracle`] will enumerate.
pub const ORACLE_ITEM_CAP: usize = 22;

/// Absolute accuracy of the scalar inverse solve, in units of `x`.
pub const INVERSE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CachingParams {
    /// Bisection accuracy on the level, relative to `|eps_min|`.
    pub accuracy: f64,
    /// Multiplier applied to the smallest efficiency to bracket the level.
    pub eps_min_margin: f64,
    /// Stability margin used when judging whether a new placement is an improvement.
    pub stability_margin: f64,
}

impl Default for CachingParams {
    fn default() -> Self {
        CachingParams {
            accuracy: 1e-9,
            eps_min_margin: 1.01,
            stability_margin: 1e-6,
        }
    }
}

/// Split of one app's inputs at a station.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputClasses {
    /// Inputs cached at some other station.
    pub cached_elsewhere: Vec<usize>,
    /// Inputs cached nowhere else, sorted by `p/s` descending (index ascending on ties).
    pub order: Vec<usize>,
}

/// Partitions every app's inputs by whether another station caches them.
pub fn partition_inputs(
    scenario: &Scenario,
    cache: &CacheAssignment,
    station: usize,
) -> Vec<InputClasses> {
    scenario
        .apps
        .iter()
        .enumerate()
        .map(|(a, app)| {
            let (elsewhere, mut rest): (Vec<usize>, Vec<usize>) =
                (0..app.typical_inputs.len()).partition(|&k| cache.cached_elsewhere(station, a, k));
            let ratio = |k: usize| {
                let i = &app.typical_inputs[k];
                i.match_prob / i.result_size_bytes
            };
            rest.sort_by(|&i, &j| {
                ratio(j)
                    .partial_cmp(&ratio(i))
                    .unwrap_or(Ordering::Equal)
                    .then(i.cmp(&j))
            });
            InputClasses {
                cached_elsewhere: elsewhere,
                order: rest,
            }
        })
        .collect()
}

/// Frozen state for the caching subproblem at one station.
#[derive(Debug, Clone)]
pub struct EfficiencyContext<'a> {
    pub scenario: &'a Scenario,
    pub sched: &'a SchedulingState,
    pub station: usize,
    pub classes: Vec<InputClasses>,
    /// Aggregate hit rate contributed by inputs cached elsewhere, per app.
    pub base_hit: Vec<f64>,
}

impl<'a> EfficiencyContext<'a> {
    pub fn new(
        scenario: &'a Scenario,
        cache: &CacheAssignment,
        sched: &'a SchedulingState,
        station: usize,
    ) -> Self {
        let classes = partition_inputs(scenario, cache, station);
        let base_hit = classes
            .iter()
            .enumerate()
            .map(|(a, c)| {
                c.cached_elsewhere
                    .iter()
                    .map(|&k| scenario.apps[a].typical_inputs[k].match_prob)
                    .sum()
            })
            .collect();
        EfficiencyContext {
            scenario,
            sched,
            station,
            classes,
            base_hit,
        }
    }

    fn ratio(&self, a: usize, k: usize) -> f64 {
        let i = &self.scenario.apps[a].typical_inputs[k];
        i.match_prob / i.result_size_bytes
    }

    /// Aggregate hit rate of app `a` for a local placement `x_app`.
    pub fn hit_rate(&self, a: usize, x_app: &[f64]) -> f64 {
        self.base_hit[a]
            + self.classes[a]
                .order
                .iter()
                .map(|&k| x_app[k] * self.scenario.apps[a].typical_inputs[k].match_prob)
                .sum::<f64>()
    }

    /// Factor shared by every not-cached-elsewhere input of app `a` at hit rate `hit`.
    fn shared_factor(&self, a: usize, hit: f64) -> Result<f64> {
        let sc = self.scenario;
        let app = &sc.apps[a];
        let total = sc.total_arrival_rate(a);
        let mut sum = 0.0;
        for (m, st) in sc.stations.iter().enumerate() {
            let lambda = self.sched.lambda[a][m];
            if !self.sched.search[a][m] || lambda <= 0.0 {
                continue;
            }
            let d = d_delay1_d_phr(
                lambda * total,
                self.sched.cpu_hz(sc, a, m),
                app.mean_workload_cycles,
                sc.search_workload_cycles,
                hit,
            )?;
            let transfer = if m == self.station {
                0.0
            } else {
                st.transfer_delay_s
            };
            sum += app.weight * lambda * (d + transfer);
        }
        Ok(sum)
    }

    /// Efficiency of an input cached elsewhere; independent of the placement.
    fn elsewhere_efficiency(&self, a: usize, k: usize) -> f64 {
        let n = self.station;
        if !self.sched.search[a][n] {
            return 0.0;
        }
        -self.ratio(a, k)
            * self.scenario.apps[a].weight
            * self.sched.lambda[a][n]
            * self.scenario.stations[n].transfer_delay_s
    }

    /// Efficiency of a not-cached-elsewhere input at a given aggregate hit rate.
    /// Instability of a searched queue maps to `-inf`: any extra hit is worth it.
    fn fresh_efficiency(&self, a: usize, k: usize, hit: f64) -> f64 {
        let r = self.ratio(a, k);
        if r == 0.0 {
            return 0.0;
        }
        match self.shared_factor(a, hit) {
            Ok(f) => r * f,
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// Storage efficiency of input `k` of app `a` under local placement `x_app`.
    pub fn efficiency(&self, a: usize, k: usize, x_app: &[f64]) -> Result<f64> {
        if self.classes[a].cached_elsewhere.contains(&k) {
            return Ok(self.elsewhere_efficiency(a, k));
        }
        let r = self.ratio(a, k);
        Ok(r * self.shared_factor(a, self.hit_rate(a, x_app))?)
    }

    /// Hit rate with the first `m` sorted inputs fully cached.
    fn prefix_hit(&self, a: usize, m: usize) -> f64 {
        let inputs = &self.scenario.apps[a].typical_inputs;
        self.base_hit[a]
            + self.classes[a].order[..m]
                .iter()
                .map(|&k| inputs[k].match_prob)
                .sum::<f64>()
    }

    /// Efficiency of the `m`-th sorted input at fill `u`, earlier inputs full, later empty.
    fn positional_efficiency(&self, a: usize, m: usize, u: f64) -> f64 {
        let k = self.classes[a].order[m];
        let p = self.scenario.apps[a].typical_inputs[k].match_prob;
        self.fresh_efficiency(a, k, self.prefix_hit(a, m) + u * p)
    }

    /// Smallest fill `u` in `[0, 1]` of the `m`-th sorted input whose efficiency reaches `level`.
    pub fn solve_inverse(&self, a: usize, m: usize, level: f64) -> Result<f64> {
        let low = self.positional_efficiency(a, m, 0.0);
        let high = self.positional_efficiency(a, m, 1.0);
        if !(low <= level && level <= high) {
            return Err(Error::BracketError {
                target: level,
                low,
                high,
            });
        }
        if low >= level {
            return Ok(0.0);
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        while hi - lo > INVERSE_TOLERANCE {
            let mid = 0.5 * (lo + hi);
            if self.positional_efficiency(a, m, mid) >= level {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }

    /// Placement `g(B)`: the unique (up to ties) local cache consistent with level `level`.
    pub fn assignment_at(&self, level: f64) -> Vec<Vec<f64>> {
        let sc = self.scenario;
        let mut x: Vec<Vec<f64>> = sc
            .apps
            .iter()
            .map(|app| vec![0.0; app.typical_inputs.len()])
            .collect();
        for (a, classes) in self.classes.iter().enumerate() {
            for &k in &classes.cached_elsewhere {
                if self.elsewhere_efficiency(a, k) <= level {
                    x[a][k] = 1.0;
                }
            }
            // Inputs whose efficiency with everything before them cached is still
            // at or below the level form a prefix of the sorted order.
            let order = &classes.order;
            let count = partition_point(order.len(), |m| {
                self.positional_efficiency(a, m, 0.0) <= level
            });
            if count == 0 {
                continue;
            }
            for &k in &order[..count - 1] {
                x[a][k] = 1.0;
            }
            let m = count - 1;
            let last = order[m];
            x[a][last] = if self.positional_efficiency(a, m, 1.0) <= level {
                1.0
            } else {
                self.solve_inverse(a, m, level)
                    .expect("level bracketed by construction")
            };
        }
        x
    }

    /// Smallest efficiency over every input, evaluated with nothing cached locally.
    pub fn min_efficiency(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for (a, classes) in self.classes.iter().enumerate() {
            let at_zero = classes
                .order
                .iter()
                .map(|&k| self.fresh_efficiency(a, k, self.base_hit[a]));
            let fixed = classes
                .cached_elsewhere
                .iter()
                .map(|&k| self.elsewhere_efficiency(a, k));
            for e in at_zero.chain(fixed).filter(|e| e.is_finite()) {
                best = Some(best.map_or(e, |b| b.min(e)));
            }
        }
        best
    }

    /// Efficiencies of every input at placement `x`, indexed `[app][input]`.
    pub fn efficiencies(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.classes
            .iter()
            .enumerate()
            .map(|(a, classes)| {
                let hit = self.hit_rate(a, &x[a]);
                (0..self.scenario.apps[a].typical_inputs.len())
                    .map(|k| {
                        if classes.cached_elsewhere.contains(&k) {
                            self.elsewhere_efficiency(a, k)
                        } else {
                            self.fresh_efficiency(a, k, hit)
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Number of leading indices in `0..len` satisfying a prefix-closed predicate.
fn partition_point(len: usize, pred: impl Fn(usize) -> bool) -> usize {
    let (mut lo, mut hi) = (0, len);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pred(mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Storage efficiency of input `k` of app `a` at the context's station.
pub fn storage_efficiency(
    ctx: &EfficiencyContext<'_>,
    app: usize,
    input: usize,
    x_app: &[f64],
) -> Result<f64> {
    ctx.efficiency(app, input, x_app)
}

/// Inverse of the efficiency of the `position`-th sorted fresh input of `app`.
pub fn solve_inverse_efficiency(
    ctx: &EfficiencyContext<'_>,
    app: usize,
    position: usize,
    level: f64,
) -> Result<f64> {
    ctx.solve_inverse(app, position, level)
}

fn placement_bytes(scenario: &Scenario, x: &[Vec<f64>]) -> f64 {
    x.iter()
        .zip(&scenario.apps)
        .map(|(row, app)| {
            row.iter()
                .zip(&app.typical_inputs)
                .map(|(v, i)| v * i.result_size_bytes)
                .sum::<f64>()
        })
        .sum()
}

/// Relaxed placement at one station and the level it was found at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachingSolution {
    /// Fractional placement `[app][input]`.
    pub x: Vec<Vec<f64>>,
    pub level: f64,
    pub storage_bytes: f64,
    /// Smallest efficiency used to bracket the level (0 when nothing helps).
    pub eps_min: f64,
}

/// Solves the relaxed caching subproblem at `station` by bisection on the level.
pub fn solve_caching_bs(
    scenario: &Scenario,
    cache: &CacheAssignment,
    sched: &SchedulingState,
    station: usize,
    params: &CachingParams,
) -> CachingSolution {
    let ctx = EfficiencyContext::new(scenario, cache, sched, station);
    solve_with_context(&ctx, params)
}

pub fn solve_with_context(ctx: &EfficiencyContext<'_>, params: &CachingParams) -> CachingSolution {
    let sc = ctx.scenario;
    let capacity = sc.stations[ctx.station].storage_capacity_bytes;
    let zeros = || -> Vec<Vec<f64>> {
        sc.apps
            .iter()
            .map(|a| vec![0.0; a.typical_inputs.len()])
            .collect()
    };
    let eps_min = match ctx.min_efficiency() {
        Some(e) if e < 0.0 => e * params.eps_min_margin,
        _ => {
            return CachingSolution {
                x: zeros(),
                level: 0.0,
                storage_bytes: 0.0,
                eps_min: 0.0,
            }
        }
    };
    let tolerance = params.accuracy * eps_min.abs();
    let (mut lo, mut hi) = (eps_min, 0.0);
    while hi - lo >= tolerance {
        let mid = 0.5 * (lo + hi);
        if placement_bytes(sc, &ctx.assignment_at(mid)) < capacity {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut level = 0.5 * (lo + hi);
    let mut x = ctx.assignment_at(level);
    if placement_bytes(sc, &x) > capacity {
        level = lo;
        x = ctx.assignment_at(lo);
        if placement_bytes(sc, &x) > capacity {
            x = zeros();
        }
    }
    CachingSolution {
        storage_bytes: placement_bytes(sc, &x),
        x,
        level,
        eps_min,
    }
}

/// Drops the (at most one per app) fractional entry of a relaxed placement.
pub fn round_to_binary(x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    x.iter()
        .enumerate()
        .map(|(a, row)| {
            let fractional = row.iter().filter(|v| **v > 0.0 && **v < 1.0).count();
            if fractional > 1 {
                return Err(Error::MalformedInput(format!(
                    "app {a} has {fractional} fractional entries"
                )));
            }
            Ok(row
                .iter()
                .map(|&v| if v >= 1.0 { 1.0 } else { 0.0 })
                .collect())
        })
        .collect()
}

/// Lower bound on the share of the optimal improvement kept by rounding.
pub fn rounding_bound(max_result_size: f64, apps_cached: usize, capacity: f64) -> f64 {
    1.0 - max_result_size * apps_cached as f64 / capacity
}

/// `(D0 - D_hat) / (D0 - D_ref)` where `D_ref` is the relaxed or binary optimum.
pub fn rounding_ratio(d_empty: f64, d_rounded: f64, d_reference: f64) -> Result<f64> {
    if d_empty <= d_reference {
        return Err(Error::DegenerateInput(format!(
            "empty-cache objective {d_empty} does not exceed reference {d_reference}"
        )));
    }
    Ok((d_empty - d_rounded) / (d_empty - d_reference))
}

/// Apps with any positive entry in a station placement.
pub fn apps_with_cached_results(x: &[Vec<f64>]) -> usize {
    x.iter().filter(|row| row.iter().any(|v| *v > 0.0)).count()
}

/// Which of the level conditions a relaxed placement violates, as messages.
///
/// Checks: entries at 1 have efficiency `<= level + tol`, entries at 0 have
/// efficiency `>= level - tol`, fractional entries sit within `tol` of the level
/// and number at most one per app, and storage stays within capacity. When
/// `saturated` is set the placement must also fill capacity to within `slack` bytes.
pub fn level_condition_violations(
    ctx: &EfficiencyContext<'_>,
    solution: &CachingSolution,
    tol: f64,
    saturated: bool,
    slack: f64,
) -> Vec<String> {
    let mut out = Vec::new();
    let eff = ctx.efficiencies(&solution.x);
    let b = solution.level;
    for (a, row) in solution.x.iter().enumerate() {
        let mut fractional = 0;
        for (k, &v) in row.iter().enumerate() {
            let e = eff[a][k];
            if v >= 1.0 && e > b + tol {
                out.push(format!(
                    "app {a} input {k}: cached with efficiency {e} > level {b}"
                ));
            } else if v <= 0.0 && e < b - tol {
                out.push(format!(
                    "app {a} input {k}: empty with efficiency {e} < level {b}"
                ));
            } else if v > 0.0 && v < 1.0 {
                fractional += 1;
                if (e - b).abs() > tol {
                    out.push(format!("app {a} input {k}: fractional at {e}, level {b}"));
                }
            }
        }
        if fractional > 1 {
            out.push(format!("app {a}: {fractional} fractional entries"));
        }
    }
    let capacity = ctx.scenario.stations[ctx.station].storage_capacity_bytes;
    if solution.storage_bytes > capacity {
        out.push(format!(
            "storage {} over capacity {capacity}",
            solution.storage_bytes
        ));
    }
    if saturated && capacity - solution.storage_bytes > slack {
        out.push(format!(
            "storage {} leaves more than {slack} bytes of capacity {capacity} unused",
            solution.storage_bytes
        ));
    }
    out
}

/// Best binary placement at one station found by exhaustive enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub x: Vec<Vec<f64>>,
    pub objective: f64,
}

/// Enumerates every storage-feasible binary placement at `station`, with
/// cache-search flags re-selected for each, and returns the best.
pub fn brute_force_cache_oracle(
    scenario: &Scenario,
    cache: &CacheAssignment,
    sched: &SchedulingState,
    station: usize,
) -> Result<OracleSolution> {
    let items: Vec<(usize, usize)> = scenario
        .apps
        .iter()
        .enumerate()
        .flat_map(|(a, app)| (0..app.typical_inputs.len()).map(move |k| (a, k)))
        .collect();
    if items.len() > ORACLE_ITEM_CAP {
        return Err(Error::TooLarge {
            items: items.len(),
            cap: ORACLE_ITEM_CAP,
        });
    }
    let capacity = scenario.stations[station].storage_capacity_bytes;
    let sizes: Vec<f64> = items
        .iter()
        .map(|&(a, k)| scenario.apps[a].typical_inputs[k].result_size_bytes)
        .collect();
    let mut trial = cache.clone();
    trial.mode = CacheMode::Binary;
    let mut best: Option<OracleSolution> = None;
    for mask in 0u64..(1u64 << items.len()) {
        let bytes: f64 = (0..items.len())
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| sizes[i])
            .sum();
        if bytes > capacity {
            continue;
        }
        for (i, &(a, k)) in items.iter().enumerate() {
            trial.x[station][a][k] = (mask >> i & 1) as f64;
        }
        let Ok((value, _)) = ObjectiveModel::new(scenario, &trial)?.objective(sched) else {
            continue;
        };
        if best.as_ref().is_none_or(|b| value < b.objective) {
            best = Some(OracleSolution {
                x: trial.x[station].clone(),
                objective: value,
            });
        }
    }
    best.ok_or_else(|| Error::Infeasible("no stable placement".into()))
}

/// Result of sweeping every station's caching subproblem.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub cache: CacheAssignment,
    pub sched: SchedulingState,
    /// Objective after each station solve.
    pub solve_objectives: Vec<f64>,
    /// Objective after each full pass.
    pub pass_objectives: Vec<f64>,
}

/// Cycles through stations in index order, `passes` times, replacing each
/// station's cache by the rounded relaxed optimum when that does not raise the
/// objective. Cache-search flags are re-selected before and after every solve.
pub fn sweep_all_stations(
    scenario: &Scenario,
    cache: &CacheAssignment,
    sched: &SchedulingState,
    params: &CachingParams,
    passes: usize,
) -> Result<SweepOutcome> {
    let evaluate = |c: &CacheAssignment, s: &SchedulingState| -> Result<(f64, SchedulingState)> {
        ObjectiveModel::new(scenario, c)?
            .with_margin(params.stability_margin)
            .objective(s)
    };
    let mut cache = cache.clone();
    cache.mode = CacheMode::Binary;
    let (mut current, mut sched) = evaluate(&cache, sched)?;
    let mut solve_objectives = Vec::new();
    let mut pass_objectives = Vec::new();
    for _ in 0..passes {
        for n in 0..scenario.num_stations() {
            let solution = solve_caching_bs(scenario, &cache, &sched, n, params);
            let rounded = round_to_binary(&solution.x)?;
            if rounded != cache.x[n] {
                let mut candidate = cache.clone();
                candidate.x[n] = rounded;
                if let Ok((value, chosen)) = evaluate(&candidate, &sched) {
                    if value <= current {
                        current = value;
                        cache = candidate;
                        sched = chosen;
                    }
                }
            }
            solve_objectives.push(current);
        }
        pass_objectives.push(current);
    }
    debug_assert!(solve_objectives.windows(2).all(|w| w[1] <= w[0]));
    Ok(SweepOutcome {
        cache,
        sched,
        solve_objectives,
        pass_objectives,
    })
}

/// Relaxed-objective value of a placement at one station, other stations fixed.
pub fn relaxed_objective(
    scenario: &Scenario,
    cache: &CacheAssignment,
    sched: &SchedulingState,
    station: usize,
    x: &[Vec<f64>],
) -> Result<f64> {
    let mut trial = cache.clone();
    trial.mode = CacheMode::Fractional;
    trial.x[station] = x.to_vec();
    let hits = crate::model::compute_hit_rates_relaxed(scenario, &trial)?;
    Ok(ObjectiveModel::with_hits(scenario, hits)
        .objective(sched)?
        .0)
}

/// Binary-objective value of a placement at one station, other stations fixed.
pub fn binary_objective(
    scenario: &Scenario,
    cache: &CacheAssignment,
    sched: &SchedulingState,
    station: usize,
    x: &[Vec<f64>],
) -> Result<f64> {
    let mut trial = cache.clone();
    trial.x[station] = x.to_vec();
    let hits = compute_hit_rates(scenario, &trial)?;
    Ok(ObjectiveModel::with_hits(scenario, hits)
        .objective(sched)?
        .0)
}
