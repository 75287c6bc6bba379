//! Joint optimization of computation-result caching, cache-search strategy,
//! workload scheduling and CPU allocation across collaborative edge servers.
//!
//! The crate minimizes the weighted mean task response time of a network of
//! base stations that can forward tasks to each other and reuse cached results
//! of similar earlier tasks. Building blocks:
//!
//! * [`model`]: scenario, decision variables, hit rates, feasibility checks.
//! * [`delay`]: queueing delay formulas, the objective and its gradient.
//! * [`caching`]: per-station cache placement by bisection on a storage-efficiency level.
//! * [`scheduling`]: projected gradient descent over workload split and CPU shares.
//! * [`solver`]: alternating minimization plus the NoC / NoR / Greedy baselines.
//! * [`queuesim`]: discrete-event check of the queueing formulas.
//! * [`experiments`]: seeded scenario generation and parameter sweeps.

pub mod caching;
pub mod delay;
pub mod error;
pub mod experiments;
pub mod model;
pub mod queuesim;
pub mod rng;
pub mod scheduling;
pub mod solver;

pub use error::{Error, Result};
pub use model::{
    Application, BaseStation, CacheAssignment, CacheMode, HitRateTable, Scenario, SchedulingState,
    TypicalInput, Violation,
};
pub use solver::{Algorithm, SolveParams, SolveReport};
