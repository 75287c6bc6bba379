//! Scenario description, decision containers, hit rates and feasibility checks.
//!
//! Units are SI throughout: CPU cycles and cycles/second, bytes, seconds.
//! Indexing conventions:
//!
//! * cache entries are `x[station][app][input]`,
//! * scheduling entries are `lambda[app][station]` and `cpu_share[app][station]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::delay::ServiceRates;
use crate::error::{Error, Result};

/// Absolute tolerance applied to every equality constraint.
pub const EQUALITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypicalInput {
    /// Probability that a task of the owning app is similar enough to reuse this result.
    pub match_prob: f64,
    pub result_size_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Application {
    /// Priority weight in the objective.
    pub weight: f64,
    /// Mean of the exponentially distributed task workload.
    pub mean_workload_cycles: f64,
    pub typical_inputs: Vec<TypicalInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseStation {
    pub compute_capacity_hz: f64,
    pub storage_capacity_bytes: f64,
    /// Delay for moving a task or a result between this station and any neighbor.
    pub transfer_delay_s: f64,
    /// Poisson arrival rate per app, tasks/second.
    pub arrival_rates: Vec<f64>,
}

/// Immutable network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Cycles spent searching the cache, shared by all apps.
    pub search_workload_cycles: f64,
    pub stations: Vec<BaseStation>,
    pub apps: Vec<Application>,
}

impl Scenario {
    /// Builds a scenario and checks every structural invariant.
    pub fn new(
        search_workload_cycles: f64,
        stations: Vec<BaseStation>,
        apps: Vec<Application>,
    ) -> Result<Self> {
        let scenario = Scenario {
            search_workload_cycles,
            stations,
            apps,
        };
        scenario.check()?;
        Ok(scenario)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let scenario: Scenario = serde_json::from_str(text)?;
        scenario.check()?;
        Ok(scenario)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidScenario(msg));
        if self.stations.is_empty() {
            return bad("at least one station is required".into());
        }
        if self.apps.is_empty() {
            return bad("at least one app is required".into());
        }
        if !(self.search_workload_cycles.is_finite() && self.search_workload_cycles >= 0.0) {
            return bad(format!(
                "search workload must be finite and non-negative, got {}",
                self.search_workload_cycles
            ));
        }
        for (n, st) in self.stations.iter().enumerate() {
            if !(st.compute_capacity_hz.is_finite() && st.compute_capacity_hz > 0.0) {
                return bad(format!("station {n}: compute capacity must be positive"));
            }
            if !(st.storage_capacity_bytes.is_finite() && st.storage_capacity_bytes > 0.0) {
                return bad(format!("station {n}: storage capacity must be positive"));
            }
            if !(st.transfer_delay_s.is_finite() && st.transfer_delay_s >= 0.0) {
                return bad(format!("station {n}: transfer delay must be non-negative"));
            }
            if st.arrival_rates.len() != self.apps.len() {
                return bad(format!(
                    "station {n}: {} arrival rates for {} apps",
                    st.arrival_rates.len(),
                    self.apps.len()
                ));
            }
            if let Some(r) = st
                .arrival_rates
                .iter()
                .find(|r| !(r.is_finite() && **r >= 0.0))
            {
                return bad(format!("station {n}: invalid arrival rate {r}"));
            }
        }
        for (a, app) in self.apps.iter().enumerate() {
            if !(app.weight.is_finite() && app.weight > 0.0) {
                return bad(format!("app {a}: weight must be positive"));
            }
            if !(app.mean_workload_cycles.is_finite() && app.mean_workload_cycles > 0.0) {
                return bad(format!("app {a}: mean workload must be positive"));
            }
            let mut total = 0.0;
            for (k, input) in app.typical_inputs.iter().enumerate() {
                if !(0.0..=1.0).contains(&input.match_prob) {
                    return bad(format!(
                        "app {a} input {k}: match probability outside [0,1]"
                    ));
                }
                if !(input.result_size_bytes.is_finite() && input.result_size_bytes > 0.0) {
                    return bad(format!("app {a} input {k}: result size must be positive"));
                }
                total += input.match_prob;
            }
            if total > 1.0 + EQUALITY_TOLERANCE {
                return bad(format!("app {a}: match probabilities sum to {total} > 1"));
            }
        }
        Ok(())
    }

    pub fn num_stations(&self) -> usize {
        self.stations.len()
    }

    pub fn num_apps(&self) -> usize {
        self.apps.len()
    }

    /// R^a: arrival rate of app `a` summed over all stations.
    pub fn total_arrival_rate(&self, app: usize) -> f64 {
        self.stations.iter().map(|s| s.arrival_rates[app]).sum()
    }

    /// Largest result size over every app and input (0 if there are none).
    pub fn max_result_size(&self) -> f64 {
        self.apps
            .iter()
            .flat_map(|a| a.typical_inputs.iter())
            .map(|i| i.result_size_bytes)
            .fold(0.0, f64::max)
    }

    /// Copy of the scenario restricted to one station, as if it had no neighbors.
    pub fn isolate_station(&self, station: usize) -> Scenario {
        Scenario {
            search_workload_cycles: self.search_workload_cycles,
            stations: vec![self.stations[station].clone()],
            apps: self.apps.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    Fractional,
    Binary,
}

/// Caching decisions `x[station][app][input]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheAssignment {
    pub mode: CacheMode,
    pub x: Vec<Vec<Vec<f64>>>,
}

impl CacheAssignment {
    /// Empty binary cache shaped after the scenario.
    pub fn empty(scenario: &Scenario) -> Self {
        let per_station: Vec<Vec<f64>> = scenario
            .apps
            .iter()
            .map(|a| vec![0.0; a.typical_inputs.len()])
            .collect();
        CacheAssignment {
            mode: CacheMode::Binary,
            x: vec![per_station; scenario.num_stations()],
        }
    }

    pub fn check_dimensions(&self, scenario: &Scenario) -> Result<()> {
        if self.x.len() != scenario.num_stations() {
            return Err(Error::DimensionMismatch(format!(
                "cache covers {} stations, scenario has {}",
                self.x.len(),
                scenario.num_stations()
            )));
        }
        for (n, row) in self.x.iter().enumerate() {
            if row.len() != scenario.num_apps() {
                return Err(Error::DimensionMismatch(format!(
                    "station {n}: cache covers {} apps, scenario has {}",
                    row.len(),
                    scenario.num_apps()
                )));
            }
            for (a, items) in row.iter().enumerate() {
                let expected = scenario.apps[a].typical_inputs.len();
                if items.len() != expected {
                    return Err(Error::DimensionMismatch(format!(
                        "station {n} app {a}: {} cache entries for {expected} inputs",
                        items.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.x
            .iter()
            .flatten()
            .flatten()
            .all(|&v| v == 0.0 || v == 1.0)
    }

    /// Whether input `k` of app `a` is cached anywhere except `station`.
    pub fn cached_elsewhere(&self, station: usize, app: usize, input: usize) -> bool {
        self.x
            .iter()
            .enumerate()
            .filter(|(m, _)| *m != station)
            .map(|(_, row)| row[app][input])
            .sum::<f64>()
            > 0.0
    }
}

/// Bytes of storage occupied at `station`.
pub fn storage_used(scenario: &Scenario, cache: &CacheAssignment, station: usize) -> f64 {
    cache.x[station]
        .iter()
        .zip(&scenario.apps)
        .map(|(items, app)| {
            items
                .iter()
                .zip(&app.typical_inputs)
                .map(|(x, input)| x * input.result_size_bytes)
                .sum::<f64>()
        })
        .sum()
}

/// Workload split, CPU shares and cache-search flags, all indexed `[app][station]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulingState {
    /// Fraction of the app's total arrivals served at each station.
    pub lambda: Vec<Vec<f64>>,
    /// Share of the station's CPU given to the app.
    pub cpu_share: Vec<Vec<f64>>,
    /// Whether the station searches its cache before processing the app's tasks.
    pub search: Vec<Vec<bool>>,
}

impl SchedulingState {
    /// Workload in proportion to compute capacity, CPU split evenly, no cache search.
    pub fn proportional(scenario: &Scenario) -> Self {
        let total: f64 = scenario
            .stations
            .iter()
            .map(|s| s.compute_capacity_hz)
            .sum();
        let row: Vec<f64> = scenario
            .stations
            .iter()
            .map(|s| s.compute_capacity_hz / total)
            .collect();
        let apps = scenario.num_apps();
        SchedulingState {
            lambda: vec![row; apps],
            cpu_share: vec![vec![1.0 / apps as f64; scenario.num_stations()]; apps],
            search: vec![vec![false; scenario.num_stations()]; apps],
        }
    }

    pub fn check_dimensions(&self, scenario: &Scenario) -> Result<()> {
        let (a, n) = (scenario.num_apps(), scenario.num_stations());
        let ok = |m: usize, rows: &[usize]| m == a && rows.iter().all(|&r| r == n);
        let l: Vec<usize> = self.lambda.iter().map(Vec::len).collect();
        let f: Vec<usize> = self.cpu_share.iter().map(Vec::len).collect();
        let y: Vec<usize> = self.search.iter().map(Vec::len).collect();
        if ok(self.lambda.len(), &l) && ok(self.cpu_share.len(), &f) && ok(self.search.len(), &y) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "scheduling state must be {a} apps x {n} stations"
            )))
        }
    }

    /// Allocated CPU f^a_n in cycles/second.
    pub fn cpu_hz(&self, scenario: &Scenario, app: usize, station: usize) -> f64 {
        self.cpu_share[app][station] * scenario.stations[station].compute_capacity_hz
    }
}

/// Local, neighboring and aggregate hit rates, indexed `[app][station]` / `[app]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRateTable {
    pub local: Vec<Vec<f64>>,
    pub neighbor: Vec<Vec<f64>>,
    pub total: Vec<f64>,
}

/// Hit rates with the neighbor indicator applied literally: any positive
/// neighbor sum counts as cached elsewhere.
pub fn compute_hit_rates(scenario: &Scenario, cache: &CacheAssignment) -> Result<HitRateTable> {
    hit_rates_with(scenario, cache, |s| if s > 0.0 { 1.0 } else { 0.0 })
}

/// Hit rates with the neighbor indicator replaced by `min(1, sum)`.
///
/// Agrees with [`compute_hit_rates`] on binary caches and is linear in a single
/// station's fractional entries, which is the model the caching solver optimizes.
pub fn compute_hit_rates_relaxed(
    scenario: &Scenario,
    cache: &CacheAssignment,
) -> Result<HitRateTable> {
    hit_rates_with(scenario, cache, |s| s.min(1.0))
}

fn hit_rates_with(
    scenario: &Scenario,
    cache: &CacheAssignment,
    indicator: impl Fn(f64) -> f64,
) -> Result<HitRateTable> {
    cache.check_dimensions(scenario)?;
    let stations = scenario.num_stations();
    let mut local = vec![vec![0.0; stations]; scenario.num_apps()];
    let mut neighbor = vec![vec![0.0; stations]; scenario.num_apps()];
    let mut total = vec![0.0; scenario.num_apps()];
    for (a, app) in scenario.apps.iter().enumerate() {
        let column_sums: Vec<f64> = (0..app.typical_inputs.len())
            .map(|k| cache.x.iter().map(|row| row[a][k]).sum())
            .collect();
        for n in 0..stations {
            let mut lhr = 0.0;
            let mut nhr = 0.0;
            for (k, input) in app.typical_inputs.iter().enumerate() {
                let x = cache.x[n][a][k];
                lhr += x * input.match_prob;
                nhr += input.match_prob * (1.0 - x) * indicator(column_sums[k] - x);
            }
            local[a][n] = lhr;
            neighbor[a][n] = nhr;
        }
        total[a] = local[a][0] + neighbor[a][0];
    }
    Ok(HitRateTable {
        local,
        neighbor,
        total,
    })
}

/// One violated constraint of the joint problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    /// Cached bytes exceed the station's storage by `excess`.
    Storage { station: usize, excess: f64 },
    /// Workload fractions of an app sum to `1 + excess`.
    WorkloadSum { app: usize, excess: f64 },
    /// CPU shares at a station sum to `1 + excess`.
    CpuShareSum { station: usize, excess: f64 },
    /// `load - rate >= 0` on the selected branch; `margin` is that difference.
    Stability {
        app: usize,
        station: usize,
        margin: f64,
    },
    /// A variable outside its admissible range.
    Range {
        variable: String,
        station: usize,
        app: usize,
        value: f64,
    },
}

/// Lists every violated constraint; an empty list means the state is feasible.
pub fn validate(
    scenario: &Scenario,
    cache: &CacheAssignment,
    sched: &SchedulingState,
) -> Result<Vec<Violation>> {
    cache.check_dimensions(scenario)?;
    sched.check_dimensions(scenario)?;
    let mut out = Vec::new();

    for (n, row) in cache.x.iter().enumerate() {
        for (a, items) in row.iter().enumerate() {
            for &v in items {
                let binary_ok = cache.mode == CacheMode::Fractional || v == 0.0 || v == 1.0;
                if !(0.0..=1.0).contains(&v) || !binary_ok {
                    out.push(Violation::Range {
                        variable: "x".into(),
                        station: n,
                        app: a,
                        value: v,
                    });
                }
            }
        }
        let excess = storage_used(scenario, cache, n) - scenario.stations[n].storage_capacity_bytes;
        if excess > 0.0 {
            out.push(Violation::Storage { station: n, excess });
        }
    }

    for a in 0..scenario.num_apps() {
        let excess = sched.lambda[a].iter().sum::<f64>() - 1.0;
        if excess.abs() > EQUALITY_TOLERANCE {
            out.push(Violation::WorkloadSum { app: a, excess });
        }
    }
    for n in 0..scenario.num_stations() {
        let excess = sched.cpu_share.iter().map(|r| r[n]).sum::<f64>() - 1.0;
        if excess.abs() > EQUALITY_TOLERANCE {
            out.push(Violation::CpuShareSum { station: n, excess });
        }
    }

    let hits = compute_hit_rates(scenario, cache)?;
    for (a, app) in scenario.apps.iter().enumerate() {
        let total_rate = scenario.total_arrival_rate(a);
        for n in 0..scenario.num_stations() {
            for (name, value) in [
                ("lambda", sched.lambda[a][n]),
                ("cpu_share", sched.cpu_share[a][n]),
            ] {
                if !(0.0..=1.0).contains(&value) {
                    out.push(Violation::Range {
                        variable: name.into(),
                        station: n,
                        app: a,
                        value,
                    });
                }
            }
            let lambda = sched.lambda[a][n];
            if lambda <= 0.0 {
                continue;
            }
            let rates = ServiceRates::new(
                sched.cpu_hz(scenario, a, n),
                app.mean_workload_cycles,
                scenario.search_workload_cycles,
                hits.total[a],
            );
            let rate = if sched.search[a][n] {
                rates.mu1
            } else {
                rates.mu0
            };
            let margin = lambda * total_rate - rate;
            if margin >= 0.0 {
                out.push(Violation::Stability {
                    app: a,
                    station: n,
                    margin,
                });
            }
        }
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    fn two_station_three_inputs() -> (Scenario, CacheAssignment) {
        let sc = Scenario::new(
            2.5e7,
            vec![
                station(4e9, 1e9, 0.02, vec![1.0]),
                station(4e9, 1e9, 0.02, vec![1.0]),
            ],
            vec![app(
                1.0,
                4e8,
                vec![input(0.2, 1e5), input(0.3, 1e5), input(0.1, 1e5)],
            )],
        )
        .unwrap();
        let mut cache = CacheAssignment::empty(&sc);
        cache.x[0][0] = vec![1.0, 0.0, 1.0];
        cache.x[1][0] = vec![0.0, 1.0, 1.0];
        (sc, cache)
    }

    #[test]
    fn total_arrival_rate_examples() {
        let mk = |rates: &[f64]| {
            Scenario::new(
                0.0,
                rates
                    .iter()
                    .map(|&r| station(1e9, 1.0, 0.0, vec![r]))
                    .collect(),
                vec![app(1.0, 1.0, vec![])],
            )
            .unwrap()
        };
        assert_eq!(mk(&[0.0, 0.0]).total_arrival_rate(0), 0.0);
        assert_eq!(mk(&[1.5]).total_arrival_rate(0), 1.5);
        assert_eq!(mk(&[0.5, 1.0, 1.5]).total_arrival_rate(0), 3.0);
    }

    #[test]
    fn hit_rates_empty_cache() {
        let (sc, _) = two_station_three_inputs();
        let hits = compute_hit_rates(&sc, &CacheAssignment::empty(&sc)).unwrap();
        assert!(hits.local.iter().flatten().all(|&v| v == 0.0));
        assert!(hits.neighbor.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(hits.total, vec![0.0]);
    }

    #[test]
    fn hit_rates_single_station_has_no_neighbors() {
        let sc = Scenario::new(
            0.0,
            vec![station(1e9, 1e9, 0.01, vec![1.0])],
            vec![app(1.0, 1e8, vec![input(0.2, 1.0), input(0.3, 1.0)])],
        )
        .unwrap();
        let mut cache = CacheAssignment::empty(&sc);
        cache.x[0][0] = vec![1.0, 1.0];
        let hits = compute_hit_rates(&sc, &cache).unwrap();
        assert!((hits.local[0][0] - 0.5).abs() < 1e-15);
        assert_eq!(hits.neighbor[0][0], 0.0);
        assert!((hits.total[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hit_rates_two_stations() {
        let (sc, cache) = two_station_three_inputs();
        let hits = compute_hit_rates(&sc, &cache).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(hits.local[0][0], 0.3));
        assert!(close(hits.neighbor[0][0], 0.3));
        assert!(close(hits.local[0][1], 0.4));
        assert!(close(hits.neighbor[0][1], 0.2));
        assert!(close(hits.total[0], 0.6));
    }

    #[test]
    fn hit_rates_reject_wrong_shape() {
        let (sc, mut cache) = two_station_three_inputs();
        cache.x[1][0].pop();
        assert!(matches!(
            compute_hit_rates(&sc, &cache),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn storage_used_examples() {
        let sc = Scenario::new(
            0.0,
            vec![station(1e9, 1e7, 0.0, vec![1.0])],
            vec![app(1.0, 1.0, vec![input(0.1, 1e6), input(0.1, 2e6)])],
        )
        .unwrap();
        let mut cache = CacheAssignment::empty(&sc);
        assert_eq!(storage_used(&sc, &cache, 0), 0.0);
        cache.x[0][0] = vec![1.0, 0.0];
        assert_eq!(storage_used(&sc, &cache, 0), 1e6);
        cache.x[0][0] = vec![1.0, 0.5];
        assert_eq!(storage_used(&sc, &cache, 0), 2e6);
    }

    #[test]
    fn scenario_rejects_bad_fields() {
        let good = || {
            (
                vec![station(1e9, 1e9, 0.01, vec![1.0])],
                vec![app(1.0, 1e8, vec![input(0.5, 1.0)])],
            )
        };
        let (mut st, apps) = good();
        st[0].compute_capacity_hz = 0.0;
        assert!(Scenario::new(0.0, st, apps).is_err());
        let (mut st, apps) = good();
        st[0].arrival_rates.push(1.0);
        assert!(Scenario::new(0.0, st, apps).is_err());
        let (st, mut apps) = good();
        apps[0].typical_inputs.push(input(0.6, 1.0));
        assert!(Scenario::new(0.0, st, apps).is_err());
        assert!(Scenario::new(0.0, vec![], good().1).is_err());
    }

    #[test]
    fn json_field_names() {
        let (sc, _) = two_station_three_inputs();
        let text = sc.to_json_string().unwrap();
        for key in [
            "search_workload_cycles",
            "stations",
            "compute_capacity_hz",
            "storage_capacity_bytes",
            "transfer_delay_s",
            "arrival_rates",
            "apps",
            "weight",
            "mean_workload_cycles",
            "typical_inputs",
            "match_prob",
            "result_size_bytes",
        ] {
            assert!(text.contains(&format!("\"{key}\"")), "missing {key}");
        }
        assert_eq!(Scenario::from_json_str(&text).unwrap(), sc);
    }

    fn feasible_pair() -> (Scenario, CacheAssignment, SchedulingState) {
        let (sc, cache) = two_station_three_inputs();
        let sched = SchedulingState::proportional(&sc);
        (sc, cache, sched)
    }

    #[test]
    fn validate_reports_workload_sum() {
        let (sc, cache, mut sched) = feasible_pair();
        assert!(validate(&sc, &cache, &sched).unwrap().is_empty());
        sched.lambda[0] = vec![0.6, 0.6];
        let v = validate(&sc, &cache, &sched).unwrap();
        assert_eq!(v.len(), 1);
        match &v[0] {
            Violation::WorkloadSum { app, excess } => {
                assert_eq!(*app, 0);
                assert!((excess - 0.2).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_reports_stability_boundary() {
        // mu0 = 4e9 / 4e8 = 10 tasks/s; R = 20 so lambda = 0.5 sits on the boundary.
        let (mut sc, cache, mut sched) = feasible_pair();
        sc.stations[0].arrival_rates = vec![10.0];
        sc.stations[1].arrival_rates = vec![10.0];
        sched.cpu_share = vec![vec![1.0, 1.0]];
        sched.lambda = vec![vec![0.5, 0.5]];
        let v = validate(&sc, &cache, &sched).unwrap();
        assert_eq!(v.len(), 2);
        assert!(v.iter().all(|v| matches!(v, Violation::Stability { .. })));
    }

    #[test]
    fn validate_reports_storage_and_ranges() {
        let (mut sc, mut cache, mut sched) = feasible_pair();
        sc.stations[0].storage_capacity_bytes = 1.5e5;
        cache.x[1][0][0] = 0.5;
        sched.cpu_share[0][1] = 1.2;
        let v = validate(&sc, &cache, &sched).unwrap();
        assert!(v.contains(&Violation::Storage {
            station: 0,
            excess: 0.5e5
        }));
        assert!(v
            .iter()
            .any(|v| matches!(v, Violation::Range { variable, .. } if variable == "x")));
        assert!(v
            .iter()
            .any(|v| matches!(v, Violation::Range { variable, .. } if variable == "cpu_share")));
    }

    prop_compose! {
        fn small_cache()(bits in prop::collection::vec(any::<bool>(), 12))
            -> (Scenario, CacheAssignment) {
            let sc = Scenario::new(
                2.5e7,
                (0..3).map(|_| station(4e9, 1e9, 0.02, vec![1.0, 1.0])).collect(),
                vec![
                    app(1.0, 4e8, vec![input(0.2, 1e5), input(0.1, 2e5)]),
                    app(1.0, 3e8, vec![input(0.05, 1e5), input(0.4, 1e5)]),
                ],
            ).unwrap();
            let mut cache = CacheAssignment::empty(&sc);
            let mut it = bits.into_iter();
            for n in 0..3 { for a in 0..2 { for k in 0..2 {
                cache.x[n][a][k] = if it.next().unwrap() { 1.0 } else { 0.0 };
            }}}
            (sc, cache)
        }
    }

    proptest! {
        #[test]
        fn aggregate_hit_rate_is_station_independent((sc, cache) in small_cache()) {
            let hits = compute_hit_rates(&sc, &cache).unwrap();
            for a in 0..2 {
                let per_station: Vec<f64> =
                    (0..3).map(|n| hits.local[a][n] + hits.neighbor[a][n]).collect();
                // Summation order differs across stations, so compare to rounding.
                for v in &per_station {
                    prop_assert!((v - per_station[0]).abs() < 1e-15);
                }
                let bound: f64 = sc.apps[a].typical_inputs.iter().map(|i| i.match_prob).sum();
                prop_assert!(hits.total[a] <= bound + 1e-15);
            }
        }

        #[test]
        fn raising_an_entry_never_lowers_hit_rate(
            (sc, cache) in small_cache(), n in 0usize..3, a in 0usize..2, k in 0usize..2
        ) {
            let before = compute_hit_rates(&sc, &cache).unwrap();
            let mut raised = cache.clone();
            raised.x[n][a][k] = 1.0;
            let after = compute_hit_rates(&sc, &raised).unwrap();
            prop_assert!(after.total[a] >= before.total[a] - 1e-15);
        }

        #[test]
        fn storage_is_linear(t in 0.0f64..1.0, u in 0.0f64..1.0, c in 0.0f64..3.0) {
            let sc = Scenario::new(
                0.0,
                vec![station(1e9, 1e9, 0.0, vec![1.0])],
                vec![app(1.0, 1.0, vec![input(0.1, 3e5), input(0.2, 7e5)])],
            ).unwrap();
            let mut c1 = CacheAssignment::empty(&sc);
            c1.mode = CacheMode::Fractional;
            c1.x[0][0] = vec![t, u];
            let mut c2 = c1.clone();
            c2.x[0][0] = vec![c * t, c * u];
            let lhs = storage_used(&sc, &c2, 0);
            let rhs = c * storage_used(&sc, &c1, 0);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0));
        }
    }
}
