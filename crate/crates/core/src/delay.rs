//! Response-time formulas: M/M/1 delay without cache search, M/G/1 delay with
//! cache search, per-station processing delay, per-app response time, the
//! weighted objective and its analytic gradient in `(lambda, cpu_share)`.
//!
//! A branch whose queue is unstable has no delay. That is represented as
//! `None` or [`Error::StabilityViolation`], never as a float infinity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{compute_hit_rates, CacheAssignment, HitRateTable, Scenario, SchedulingState};

/// Task service rates of the two processing branches at one (app, station) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServiceRates {
    /// Without cache search: `f / w^a`.
    pub mu0: f64,
    /// With cache search: `f / (w^s + (1 - P_hr) w^a)`.
    pub mu1: f64,
}

impl ServiceRates {
    pub fn new(cpu_hz: f64, workload: f64, search: f64, hit_rate: f64) -> Self {
        ServiceRates {
            mu0: cpu_hz / workload,
            mu1: cpu_hz / (search + (1.0 - hit_rate) * workload),
        }
    }
}

/// Mean sojourn time of the M/M/1 queue used when the cache is not searched.
pub fn delay_no_cache(load: f64, mu0: f64) -> Result<f64> {
    if load < mu0 {
        Ok(1.0 / (mu0 - load))
    } else {
        Err(Error::StabilityViolation { load, rate: mu0 })
    }
}

/// Mean sojourn time of the M/G/1 queue used when the cache is searched first.
pub fn delay_with_cache(load: f64, rates: ServiceRates, hit_rate: f64) -> Result<f64> {
    let ServiceRates { mu0, mu1 } = rates;
    if load >= mu1 {
        return Err(Error::StabilityViolation { load, rate: mu1 });
    }
    Ok(1.0 / mu1
        + load / (2.0 * mu1 * (mu1 - load))
        + (1.0 - hit_rate) * (1.0 + hit_rate) * load * mu1 / (2.0 * (mu1 - load) * mu0 * mu0))
}

/// CDF of the per-task computation cost when the cache is searched first.
pub fn service_time_cdf(w: f64, hit_rate: f64, workload: f64, search: f64) -> f64 {
    if w < search {
        0.0
    } else {
        1.0 - (1.0 - hit_rate) * (-(w - search) / workload).exp()
    }
}

/// Cache-search flag: search only when it strictly lowers the processing delay.
///
/// `None` marks a branch whose queue would be unstable.
pub fn choose_cache_search(
    no_cache: Option<f64>,
    with_cache: Option<f64>,
    neighbor_hit_rate: f64,
    transfer_delay: f64,
) -> bool {
    match (no_cache, with_cache) {
        (_, None) => false,
        (None, Some(_)) => true,
        (Some(d0), Some(d1)) => d0 > d1 + neighbor_hit_rate * transfer_delay,
    }
}

/// Processing delay `D^a_n` of the selected branch.
pub fn processing_delay(
    load: f64,
    rates: ServiceRates,
    hit_rate: f64,
    neighbor_hit_rate: f64,
    transfer_delay: f64,
    search: bool,
) -> Result<f64> {
    if search {
        Ok(delay_with_cache(load, rates, hit_rate)? + neighbor_hit_rate * transfer_delay)
    } else {
        delay_no_cache(load, rates.mu0)
    }
}

/// Response time `D^a` given the processing delay at every station.
///
/// An app with no arrivals anywhere has response time 0.
pub fn response_time(
    scenario: &Scenario,
    app: usize,
    sched: &SchedulingState,
    processing: &[f64],
) -> f64 {
    let total = scenario.total_arrival_rate(app);
    if total <= 0.0 {
        return 0.0;
    }
    scenario
        .stations
        .iter()
        .enumerate()
        .map(|(n, st)| {
            let lambda = sched.lambda[app][n];
            lambda * processing[n]
                + (lambda * total - st.arrival_rates[app]).abs() * st.transfer_delay_s / total
        })
        .sum()
}

/// Derivative of the cache-search delay with respect to the aggregate hit rate.
pub fn d_delay1_d_phr(
    load: f64,
    cpu_hz: f64,
    workload: f64,
    search: f64,
    hit_rate: f64,
) -> Result<f64> {
    let cost = (1.0 - hit_rate) * workload + search;
    let slack = cpu_hz - load * cost;
    if slack <= 0.0 {
        return Err(Error::StabilityViolation {
            load,
            rate: cpu_hz / cost,
        });
    }
    let mu0 = cpu_hz / workload;
    let (f, l, w, p) = (cpu_hz, load, workload, hit_rate);
    Ok(-w / f
        - l * l * w * cost * cost / (2.0 * f * slack * slack)
        - f * l * l * (1.0 - p) * (1.0 + p) * w / (2.0 * mu0 * mu0 * slack * slack)
        - f * l * p / (mu0 * mu0 * slack)
        - l * w * cost / (f * slack))
}

/// Partial derivatives of the weighted objective, indexed `[app][station]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveGradient {
    pub lambda: Vec<Vec<f64>>,
    pub cpu_share: Vec<Vec<f64>>,
}

impl ObjectiveGradient {
    /// Inner product with a displacement in `(lambda, cpu_share)`.
    pub fn dot(&self, d_lambda: &[Vec<f64>], d_share: &[Vec<f64>]) -> f64 {
        let part = |g: &[Vec<f64>], d: &[Vec<f64>]| -> f64 {
            g.iter()
                .zip(d)
                .flat_map(|(gr, dr)| gr.iter().zip(dr).map(|(x, y)| x * y))
                .sum()
        };
        part(&self.lambda, d_lambda) + part(&self.cpu_share, d_share)
    }
}

/// Delay and its load/CPU partials on one branch at one (app, station) pair.
struct BranchEval {
    delay: f64,
    d_load: f64,
    d_cpu: f64,
}

/// Objective evaluator for a fixed cache (hit rates frozen).
///
/// `margin` shrinks the stable region: a branch is usable only while
/// `load <= (1 - margin) * rate` (and always strictly below `rate`).
#[derive(Debug, Clone)]
pub struct ObjectiveModel<'a> {
    pub scenario: &'a Scenario,
    pub hits: HitRateTable,
    pub margin: f64,
}

impl<'a> ObjectiveModel<'a> {
    pub fn new(scenario: &'a Scenario, cache: &CacheAssignment) -> Result<Self> {
        Ok(Self::with_hits(
            scenario,
            compute_hit_rates(scenario, cache)?,
        ))
    }

    pub fn with_hits(scenario: &'a Scenario, hits: HitRateTable) -> Self {
        ObjectiveModel {
            scenario,
            hits,
            margin: 0.0,
        }
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    fn usable(&self, load: f64, rate: f64) -> bool {
        load < rate && load <= (1.0 - self.margin) * rate
    }

    fn rates(&self, a: usize, n: usize, sched: &SchedulingState) -> ServiceRates {
        ServiceRates::new(
            sched.cpu_hz(self.scenario, a, n),
            self.scenario.apps[a].mean_workload_cycles,
            self.scenario.search_workload_cycles,
            self.hits.total[a],
        )
    }

    fn load(&self, a: usize, n: usize, sched: &SchedulingState) -> f64 {
        sched.lambda[a][n] * self.scenario.total_arrival_rate(a)
    }

    /// Processing delays of both branches at (a, n); `None` where unusable.
    pub fn branch_delays(
        &self,
        a: usize,
        n: usize,
        sched: &SchedulingState,
    ) -> (Option<f64>, Option<f64>) {
        let rates = self.rates(a, n, sched);
        let load = self.load(a, n, sched);
        let d0 = self
            .usable(load, rates.mu0)
            .then(|| delay_no_cache(load, rates.mu0).ok())
            .flatten();
        let d1 = self
            .usable(load, rates.mu1)
            .then(|| {
                processing_delay(
                    load,
                    rates,
                    self.hits.total[a],
                    self.hits.neighbor[a][n],
                    self.scenario.stations[n].transfer_delay_s,
                    true,
                )
                .ok()
            })
            .flatten();
        (d0, d1)
    }

    /// Re-derives every cache-search flag with the delay-minimizing rule.
    pub fn select_search(&self, sched: &mut SchedulingState) {
        for a in 0..self.scenario.num_apps() {
            for n in 0..self.scenario.num_stations() {
                let (d0, d1) = self.branch_delays(a, n, sched);
                sched.search[a][n] = choose_cache_search(
                    d0,
                    d1,
                    self.hits.neighbor[a][n],
                    self.scenario.stations[n].transfer_delay_s,
                );
            }
        }
    }

    fn idle(&self, a: usize, n: usize, sched: &SchedulingState) -> bool {
        sched.lambda[a][n] == 0.0 && sched.cpu_share[a][n] == 0.0
    }

    fn branch(&self, a: usize, n: usize, sched: &SchedulingState) -> Result<BranchEval> {
        let rates = self.rates(a, n, sched);
        let load = self.load(a, n, sched);
        let hit = self.hits.total[a];
        let workload = self.scenario.apps[a].mean_workload_cycles;
        if !sched.search[a][n] {
            if !self.usable(load, rates.mu0) {
                return Err(Error::StabilityViolation {
                    load,
                    rate: rates.mu0,
                });
            }
            let d = delay_no_cache(load, rates.mu0)?;
            return Ok(BranchEval {
                delay: d,
                d_load: d * d,
                d_cpu: -d * d / workload,
            });
        }
        let ServiceRates { mu0, mu1 } = rates;
        if !self.usable(load, mu1) {
            return Err(Error::StabilityViolation { load, rate: mu1 });
        }
        let q = (1.0 - hit) * (1.0 + hit);
        let gap = mu1 - load;
        let delay = processing_delay(
            load,
            rates,
            hit,
            self.hits.neighbor[a][n],
            self.scenario.stations[n].transfer_delay_s,
            true,
        )?;
        let d_load = 1.0 / (2.0 * gap * gap) + q * mu1 * mu1 / (2.0 * mu0 * mu0 * gap * gap);
        let d_mu1 = -1.0 / (mu1 * mu1)
            - load * (2.0 * mu1 - load) / (2.0 * mu1 * mu1 * gap * gap)
            - q * load * load / (2.0 * mu0 * mu0 * gap * gap);
        let d_mu0 = -q * load * mu1 / (mu0 * mu0 * mu0 * gap);
        let cost = self.scenario.search_workload_cycles + (1.0 - hit) * workload;
        Ok(BranchEval {
            delay,
            d_load,
            d_cpu: d_mu1 / cost + d_mu0 / workload,
        })
    }

    /// Objective with the cache-search flags in `sched` held fixed.
    pub fn objective_frozen(&self, sched: &SchedulingState) -> Result<f64> {
        let sc = self.scenario;
        let mut total = 0.0;
        for (a, app) in sc.apps.iter().enumerate() {
            let mut processing = vec![0.0; sc.num_stations()];
            for (n, slot) in processing.iter_mut().enumerate() {
                if self.idle(a, n, sched) {
                    continue;
                }
                if sched.lambda[a][n] > 0.0 && sched.cpu_share[a][n] <= 0.0 {
                    return Err(Error::StabilityViolation {
                        load: self.load(a, n, sched),
                        rate: 0.0,
                    });
                }
                *slot = self.branch(a, n, sched)?.delay;
            }
            total += app.weight * response_time(sc, a, sched, &processing);
        }
        Ok(total)
    }

    /// Objective after re-selecting every cache-search flag; returns the flags used.
    pub fn objective(&self, sched: &SchedulingState) -> Result<(f64, SchedulingState)> {
        let mut chosen = sched.clone();
        self.select_search(&mut chosen);
        let value = self.objective_frozen(&chosen)?;
        Ok((value, chosen))
    }

    /// True when every active pair keeps its selected branch inside the margin.
    pub fn is_stable(&self, sched: &SchedulingState) -> bool {
        (0..self.scenario.num_apps()).all(|a| {
            (0..self.scenario.num_stations()).all(|n| {
                if sched.lambda[a][n] <= 0.0 {
                    return true;
                }
                let rates = self.rates(a, n, sched);
                let rate = if sched.search[a][n] {
                    rates.mu1
                } else {
                    rates.mu0
                };
                sched.cpu_share[a][n] > 0.0 && self.usable(self.load(a, n, sched), rate)
            })
        })
    }

    /// Analytic gradient with the cache-search flags in `sched` frozen.
    ///
    /// The kink of `|lambda R - R_n|` takes the `+1` subgradient.
    pub fn gradient(&self, sched: &SchedulingState) -> Result<ObjectiveGradient> {
        let sc = self.scenario;
        let (apps, stations) = (sc.num_apps(), sc.num_stations());
        let mut g = ObjectiveGradient {
            lambda: vec![vec![0.0; stations]; apps],
            cpu_share: vec![vec![0.0; stations]; apps],
        };
        for (a, app) in sc.apps.iter().enumerate() {
            let total = sc.total_arrival_rate(a);
            if total <= 0.0 {
                continue;
            }
            for (n, st) in sc.stations.iter().enumerate() {
                let lambda = sched.lambda[a][n];
                let sign = if lambda * total - st.arrival_rates[a] >= 0.0 {
                    1.0
                } else {
                    -1.0
                };
                let transfer = app.weight * sign * st.transfer_delay_s;
                if self.idle(a, n, sched) {
                    g.lambda[a][n] = transfer;
                    continue;
                }
                let b = self.branch(a, n, sched)?;
                g.lambda[a][n] = app.weight * (b.delay + lambda * total * b.d_load) + transfer;
                g.cpu_share[a][n] = app.weight * lambda * st.compute_capacity_hz * b.d_cpu;
            }
        }
        Ok(g)
    }
}

/// Weighted objective with cache-search flags re-selected from the current state.
pub fn weighted_objective(
    scenario: &Scenario,
    cache: &CacheAssignment,
    sched: &SchedulingState,
) -> Result<f64> {
    Ok(ObjectiveModel::new(scenario, cache)?.objective(sched)?.0)
}

/// Weighted objective using the cache-search flags exactly as supplied.
pub fn weighted_objective_frozen(
    scenario: &Scenario,
    cache: &CacheAssignment,
    sched: &SchedulingState,
) -> Result<f64> {
    ObjectiveModel::new(scenario, cache)?.objective_frozen(sched)
}

/// Analytic gradient of the objective with the supplied cache-search flags frozen.
pub fn objective_gradient(
    scenario: &Scenario,
    cache: &CacheAssignment,
    sched: &SchedulingState,
) -> Result<ObjectiveGradient> {
    ObjectiveModel::new(scenario, cache)?.gradient(sched)
}
