//! Workload split and CPU allocation by projected gradient descent.
//!
//! Each app's workload fractions live on a simplex over stations and each
//! station's CPU shares live on a simplex over apps. An iteration freezes the
//! cache-search flags, takes a gradient step of size `theta0 / sqrt(i)`,
//! projects back onto the simplices and backtracks along the resulting
//! direction until the objective decrease passes the Armijo test and every
//! active queue keeps its stability margin.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::delay::{ObjectiveGradient, ObjectiveModel};
use crate::error::{Error, Result};
use crate::model::{CacheAssignment, Scenario, SchedulingState};

/// Loads are repaired to at most this share of the best branch's service rate.
const REPAIR_TARGET: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdParams {
    pub outer_iterations: usize,
    /// Step at iteration `i` (1-based) is `theta0 / sqrt(i)`.
    pub theta0: f64,
    pub armijo_alpha: f64,
    pub contraction_beta: f64,
    pub max_backtracks: u32,
    pub stability_margin: f64,
}

impl Default for PgdParams {
    fn default() -> Self {
        PgdParams {
            outer_iterations: 10,
            theta0: 1.0,
            armijo_alpha: 0.3,
            contraction_beta: 0.5,
            max_backtracks: 60,
            stability_margin: 1e-6,
        }
    }
}

impl PgdParams {
    pub fn check(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.armijo_alpha) || !unit(self.contraction_beta) {
            return Err(Error::InvalidScenario(
                "armijo alpha and contraction beta must lie in (0, 1)".into(),
            ));
        }
        if self.max_backtracks < 1 {
            return Err(Error::InvalidScenario(
                "max_backtracks must be at least 1".into(),
            ));
        }
        if !(0.0..=0.1).contains(&self.stability_margin) {
            return Err(Error::InvalidScenario(
                "stability margin must lie in [0, 0.1]".into(),
            ));
        }
        if !(self.theta0 > 0.0 && self.theta0.is_finite()) {
            return Err(Error::InvalidScenario("theta0 must be positive".into()));
        }
        Ok(())
    }

    pub fn step(&self, iteration: usize) -> f64 {
        self.theta0 / (iteration as f64).sqrt()
    }
}

/// Euclidean projection onto `{x >= 0, sum x = 1}` by sorting.
pub fn project_simplex(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyVector);
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let mut cumulative = 0.0;
    let mut threshold = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumulative += uj;
        let t = (cumulative - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            threshold = t;
        }
    }
    Ok(v.iter().map(|x| (x - threshold).max(0.0)).collect())
}

/// Projects every workload row `[app]` and every CPU-share column `[station]`.
pub fn project_decisions(
    lambda: &[Vec<f64>],
    cpu_share: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let rows = lambda
        .iter()
        .map(|row| project_simplex(row))
        .collect::<Result<Vec<_>>>()?;
    let apps = cpu_share.len();
    let stations = cpu_share.first().map_or(0, Vec::len);
    let mut shares = vec![vec![0.0; stations]; apps];
    for n in 0..stations {
        let column: Vec<f64> = cpu_share.iter().map(|r| r[n]).collect();
        for (a, v) in project_simplex(&column)?.into_iter().enumerate() {
            shares[a][n] = v;
        }
    }
    Ok((rows, shares))
}

/// Displacement from the current point to its projected gradient step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub lambda: Vec<Vec<f64>>,
    pub cpu_share: Vec<Vec<f64>>,
}

impl Direction {
    pub fn between(from: &SchedulingState, to: &SchedulingState) -> Self {
        let diff = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
            a.iter()
                .zip(b)
                .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| y - x).collect())
                .collect()
        };
        Direction {
            lambda: diff(&from.lambda, &to.lambda),
            cpu_share: diff(&from.cpu_share, &to.cpu_share),
        }
    }

    /// Point `from + t * self`, keeping `from`'s cache-search flags.
    pub fn apply(&self, from: &SchedulingState, t: f64) -> SchedulingState {
        let shift = |base: &[Vec<f64>], d: &[Vec<f64>]| -> Vec<Vec<f64>> {
            base.iter()
                .zip(d)
                .map(|(rb, rd)| {
                    rb.iter()
                        .zip(rd)
                        .map(|(x, dx)| (x + t * dx).max(0.0))
                        .collect()
                })
                .collect()
        };
        SchedulingState {
            lambda: shift(&from.lambda, &self.lambda),
            cpu_share: shift(&from.cpu_share, &self.cpu_share),
            search: from.search.clone(),
        }
    }

    pub fn slope(&self, gradient: &ObjectiveGradient) -> f64 {
        gradient.dot(&self.lambda, &self.cpu_share)
    }
}

/// Accepted step of a backtracking search.
#[derive(Debug, Clone, PartialEq)]
pub struct LineStep {
    /// Number of contractions: the step taken is `beta^j`.
    pub contractions: u32,
    /// Contractions needed before the trial point became stable.
    pub stability_contractions: u32,
    pub objective: f64,
}

/// Generic Armijo backtracking on `t = beta^j`, `j = 0, 1, ..`.
///
/// `eval(t)` returns the objective at step `t`, or `None` where the trial point
/// violates stability. Accepts the smallest `j` with a stable trial point and
/// `current - value >= -alpha * t * slope`.
pub fn line_search(
    current: f64,
    slope: f64,
    params: &PgdParams,
    mut eval: impl FnMut(f64) -> Option<f64>,
) -> Result<LineStep> {
    let mut stability_contractions = None;
    for j in 0..=params.max_backtracks {
        let t = params.contraction_beta.powi(j as i32);
        let Some(value) = eval(t) else { continue };
        let stable_at = *stability_contractions.get_or_insert(j);
        if current - value >= -params.armijo_alpha * t * slope {
            return Ok(LineStep {
                contractions: j,
                stability_contractions: stable_at,
                objective: value,
            });
        }
    }
    Err(Error::LineSearchExhausted(params.max_backtracks))
}

/// Backtracks from `point` along `direction` with the cache-search flags frozen.
pub fn backtrack(
    model: &ObjectiveModel<'_>,
    point: &SchedulingState,
    direction: &Direction,
    gradient: &ObjectiveGradient,
    params: &PgdParams,
) -> Result<(LineStep, SchedulingState)> {
    let current = model.objective_frozen(point)?;
    let slope = direction.slope(gradient);
    let step = line_search(current, slope, params, |t| {
        let trial = direction.apply(point, t);
        if !model.is_stable(&trial) {
            return None;
        }
        model.objective_frozen(&trial).ok()
    })?;
    let t = params.contraction_beta.powi(step.contractions as i32);
    Ok((step, direction.apply(point, t)))
}

/// One PGD iteration as recorded in a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdIteration {
    pub iteration: usize,
    /// Objective after the step, cache-search flags re-selected.
    pub objective_s: f64,
    pub contractions: u32,
    pub stability_contractions: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulingOutcome {
    pub sched: SchedulingState,
    pub objective: f64,
    pub trace: Vec<PgdIteration>,
    /// Set when a line search ran out of contractions and the run stopped there.
    pub line_search_exhausted: bool,
}

/// Runs `params.outer_iterations` PGD iterations from a stable starting point.
pub fn solve_scheduling(
    scenario: &Scenario,
    cache: &CacheAssignment,
    initial: &SchedulingState,
    params: &PgdParams,
) -> Result<SchedulingOutcome> {
    params.check()?;
    initial.check_dimensions(scenario)?;
    let model = ObjectiveModel::new(scenario, cache)?.with_margin(params.stability_margin);
    let (mut objective, mut sched) = model.objective(initial)?;
    if !model.is_stable(&sched) {
        return Err(Error::Infeasible(
            "initial scheduling point is not stable".into(),
        ));
    }
    let mut trace = Vec::with_capacity(params.outer_iterations);
    let mut line_search_exhausted = false;
    for i in 1..=params.outer_iterations {
        model.select_search(&mut sched);
        let gradient = model.gradient(&sched)?;
        let theta = params.step(i);
        let moved = |x: &[Vec<f64>], g: &[Vec<f64>]| -> Vec<Vec<f64>> {
            x.iter()
                .zip(g)
                .map(|(rx, rg)| rx.iter().zip(rg).map(|(v, d)| v - theta * d).collect())
                .collect()
        };
        let (lambda, cpu_share) = project_decisions(
            &moved(&sched.lambda, &gradient.lambda),
            &moved(&sched.cpu_share, &gradient.cpu_share),
        )?;
        let target = SchedulingState {
            lambda,
            cpu_share,
            search: sched.search.clone(),
        };
        let direction = Direction::between(&sched, &target);
        match backtrack(&model, &sched, &direction, &gradient, params) {
            Ok((step, next)) => {
                let (value, chosen) = model.objective(&next)?;
                sched = chosen;
                objective = value;
                trace.push(PgdIteration {
                    iteration: i,
                    objective_s: value,
                    contractions: step.contractions,
                    stability_contractions: step.stability_contractions,
                });
            }
            Err(Error::LineSearchExhausted(_)) => {
                line_search_exhausted = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(SchedulingOutcome {
        sched,
        objective,
        trace,
        line_search_exhausted,
    })
}

/// Highest service rate either branch offers at (a, n) under the current CPU split.
fn best_rate(model: &ObjectiveModel<'_>, sched: &SchedulingState, a: usize, n: usize) -> f64 {
    let sc = model.scenario;
    let f = sched.cpu_hz(sc, a, n);
    let w = sc.apps[a].mean_workload_cycles;
    let cost = sc.search_workload_cycles + (1.0 - model.hits.total[a]) * w;
    (f / w).max(f / cost)
}

/// Cycles per task on the cheaper branch.
fn cheapest_cost(model: &ObjectiveModel<'_>, a: usize) -> f64 {
    let sc = model.scenario;
    let w = sc.apps[a].mean_workload_cycles;
    w.min(sc.search_workload_cycles + (1.0 - model.hits.total[a]) * w)
}

/// Moves load off stations above their repair cap onto those with the most slack.
/// Returns false when an app's total demand exceeds the sum of its caps.
fn shift_overloads(model: &ObjectiveModel<'_>, sched: &mut SchedulingState) -> bool {
    let sc = model.scenario;
    let mut ok = true;
    for a in 0..sc.num_apps() {
        let total = sc.total_arrival_rate(a);
        if total <= 0.0 {
            continue;
        }
        let caps: Vec<f64> = (0..sc.num_stations())
            .map(|n| REPAIR_TARGET * (1.0 - model.margin) * best_rate(model, sched, a, n))
            .collect();
        if caps.iter().sum::<f64>() < total {
            ok = false;
            continue;
        }
        let mut loads: Vec<f64> = sched.lambda[a].iter().map(|l| l * total).collect();
        let mut excess = 0.0;
        for (load, cap) in loads.iter_mut().zip(&caps) {
            if *load > *cap {
                excess += *load - cap;
                *load = *cap;
            }
        }
        if excess == 0.0 {
            continue;
        }
        let mut by_slack: Vec<usize> = (0..loads.len()).collect();
        by_slack.sort_by(|&i, &j| {
            (caps[j] - loads[j])
                .partial_cmp(&(caps[i] - loads[i]))
                .unwrap_or(Ordering::Equal)
                .then(i.cmp(&j))
        });
        for n in by_slack {
            if excess <= 0.0 {
                break;
            }
            let moved = (caps[n] - loads[n]).min(excess);
            loads[n] += moved;
            excess -= moved;
        }
        sched.lambda[a] = loads.iter().map(|l| l / total).collect();
    }
    ok
}

/// Greedy starting point: workload proportional to compute capacity, CPU split
/// evenly, cache-search flags by the delay rule, then repaired for stability.
///
/// Repair first shifts overload to stations with slack. If some app cannot fit
/// even then, every station's CPU is re-split in proportion to each app's
/// demand in cycles per second and the shift is retried.
pub fn initial_feasible_point(
    scenario: &Scenario,
    cache: &CacheAssignment,
    margin: f64,
) -> Result<SchedulingState> {
    let model = ObjectiveModel::new(scenario, cache)?.with_margin(margin);
    let demand: Vec<f64> = (0..scenario.num_apps())
        .map(|a| scenario.total_arrival_rate(a) * cheapest_cost(&model, a))
        .collect();
    let capacity: f64 = scenario
        .stations
        .iter()
        .map(|s| s.compute_capacity_hz)
        .sum();
    let total_demand: f64 = demand.iter().sum();
    if total_demand >= capacity {
        return Err(Error::Infeasible(format!(
            "demand {total_demand:.4e} cycles/s exceeds total capacity {capacity:.4e}"
        )));
    }
    let mut sched = SchedulingState::proportional(scenario);
    model.select_search(&mut sched);
    if model.is_stable(&sched) {
        return Ok(sched);
    }
    if !shift_overloads(&model, &mut sched) {
        let floor = 1e-9 * total_demand.max(f64::MIN_POSITIVE);
        let weights: Vec<f64> = demand.iter().map(|d| d + floor).collect();
        let sum: f64 = weights.iter().sum();
        for (a, w) in weights.iter().enumerate() {
            sched.cpu_share[a] = vec![w / sum; scenario.num_stations()];
        }
        sched.lambda = SchedulingState::proportional(scenario).lambda;
        if !shift_overloads(&model, &mut sched) {
            return Err(Error::Infeasible(
                "no stable workload split under demand-proportional CPU shares".into(),
            ));
        }
    }
    model.select_search(&mut sched);
    if model.is_stable(&sched) {
        Ok(sched)
    } else {
        Err(Error::Infeasible("stability repair failed".into()))
    }
}
