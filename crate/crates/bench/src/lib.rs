//! Fixtures shared by the benchmarks.

use cec_core::experiments::{generate_scenario, GeneratorParams};
use cec_core::rng::{stream, uniform};
use cec_core::scheduling::initial_feasible_point;
use cec_core::solver::greedy_cache;
use cec_core::{CacheAssignment, Scenario, SchedulingState};

/// Seeded scenario with `stations` stations and `apps` apps, other settings default.
pub fn scenario(stations: usize, apps: usize) -> Scenario {
    generate_scenario(&GeneratorParams {
        stations,
        apps,
        ..GeneratorParams::default()
    })
    .expect("default generator settings are valid")
}

/// Greedy cache plus a feasible schedule for it, with cache search switched on
/// everywhere so the caching subproblem has something to optimize.
pub fn caching_state(scenario: &Scenario) -> (CacheAssignment, SchedulingState) {
    let cache = greedy_cache(scenario);
    let mut sched = initial_feasible_point(scenario, &cache, 1e-6).expect("feasible start");
    for row in &mut sched.search {
        row.fill(true);
    }
    (cache, sched)
}

/// Uniform random vector in `[-1, 1]^dim`.
pub fn random_vector(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, 0, dim as u64);
    (0..dim).map(|_| uniform(&mut rng, -1.0, 1.0)).collect()
}
