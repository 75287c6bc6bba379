//! Discrete-event simulation of one FCFS single-server queue.
//!
//! Arrivals are Poisson. Without cache search a task costs `Exp(w^a)` cycles;
//! with cache search it costs `w^s` cycles on a hit and `w^s + Exp(w^a)` on a
//! miss. The server runs at a fixed `f` cycles/s. Used to check the closed-form
//! delays in [`crate::delay`] empirically.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::delay::{delay_no_cache, delay_with_cache, ServiceRates};
use crate::error::{Error, Result};
use crate::rng::{exponential, family, stream, StreamRng};

/// Two-sided 97.5% Student-t quantile with `BATCHES - 1` degrees of freedom.
const T_QUANTILE_19: f64 = 2.093;
const BATCHES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueMode {
    NoCache,
    WithCache,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueueSimConfig {
    /// Arrival rate in tasks/s.
    pub arrival_rate: f64,
    pub cpu_hz: f64,
    pub workload_cycles: f64,
    pub search_cycles: f64,
    pub hit_rate: f64,
    pub mode: QueueMode,
    pub num_tasks: usize,
    pub warmup_tasks: usize,
    pub rng_seed: u64,
}

impl QueueSimConfig {
    /// Config with the default warm-up of 10% of `num_tasks`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        arrival_rate: f64,
        cpu_hz: f64,
        workload_cycles: f64,
        search_cycles: f64,
        hit_rate: f64,
        mode: QueueMode,
        num_tasks: usize,
        rng_seed: u64,
    ) -> Self {
        QueueSimConfig {
            arrival_rate,
            cpu_hz,
            workload_cycles,
            search_cycles,
            hit_rate,
            mode,
            num_tasks,
            warmup_tasks: num_tasks / 10,
            rng_seed,
        }
    }

    pub fn rates(&self) -> ServiceRates {
        ServiceRates::new(
            self.cpu_hz,
            self.workload_cycles,
            self.search_cycles,
            self.hit_rate,
        )
    }

    /// Service rate of the branch this config simulates.
    pub fn service_rate(&self) -> f64 {
        match self.mode {
            QueueMode::NoCache => self.rates().mu0,
            QueueMode::WithCache => self.rates().mu1,
        }
    }

    fn check(&self) -> Result<()> {
        if self.num_tasks <= self.warmup_tasks {
            return Err(Error::MalformedInput(format!(
                "num_tasks {} must exceed warmup_tasks {}",
                self.num_tasks, self.warmup_tasks
            )));
        }
        if !(0.0..=1.0).contains(&self.hit_rate) {
            return Err(Error::MalformedInput(format!("hit rate {}", self.hit_rate)));
        }
        if !(self.cpu_hz > 0.0 && self.workload_cycles > 0.0 && self.search_cycles >= 0.0) {
            return Err(Error::MalformedInput(
                "rates and workloads must be positive".into(),
            ));
        }
        if self.arrival_rate < 0.0 {
            return Err(Error::MalformedInput("negative arrival rate".into()));
        }
        let rate = self.service_rate();
        if self.arrival_rate >= rate {
            return Err(Error::UnstableConfig {
                load: self.arrival_rate,
                rate,
            });
        }
        Ok(())
    }

    /// Closed-form mean sojourn time for this config.
    pub fn analytic_mean(&self) -> Result<f64> {
        self.check()?;
        match self.mode {
            QueueMode::NoCache => delay_no_cache(self.arrival_rate, self.rates().mu0),
            QueueMode::WithCache => {
                delay_with_cache(self.arrival_rate, self.rates(), self.hit_rate)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub mean_sojourn: f64,
    /// Half-width of the batch-means 95% confidence interval.
    pub half_width_95: f64,
    pub tasks_counted: usize,
    pub arrivals: usize,
    pub departures: usize,
    /// Tasks still queued or in service when the run stopped.
    pub in_system: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    // Departures sort first at equal times so a finished task frees the server
    // before a simultaneous arrival is queued.
    Departure,
    Arrival,
}

/// Event time as ordered bits; all times are non-negative finite floats.
fn key(t: f64) -> u64 {
    t.to_bits()
}

struct Sampler {
    rng: StreamRng,
    config: QueueSimConfig,
}

impl Sampler {
    fn service_time(&mut self) -> f64 {
        let c = &self.config;
        let cycles = match c.mode {
            QueueMode::NoCache => exponential(&mut self.rng, c.workload_cycles),
            QueueMode::WithCache => {
                let u: f64 = self.rng.random();
                if u < c.hit_rate {
                    c.search_cycles
                } else {
                    c.search_cycles + exponential(&mut self.rng, c.workload_cycles)
                }
            }
        };
        cycles / c.cpu_hz
    }

    fn interarrival(&mut self) -> f64 {
        exponential(&mut self.rng, 1.0 / self.config.arrival_rate)
    }
}

/// Per-task times in arrival order, plus event counters.
struct Trajectory {
    #[cfg_attr(not(test), allow(dead_code))]
    arrival: Vec<f64>,
    sojourn: Vec<f64>,
    arrivals: usize,
    departures: usize,
}

fn run(config: &QueueSimConfig) -> Trajectory {
    let mut sampler = Sampler {
        rng: stream(config.rng_seed, family::QUEUE, 0),
        config: *config,
    };
    let mut sojourn = vec![0.0; config.num_tasks];
    let mut events: BinaryHeap<Reverse<(u64, EventKind, usize)>> = BinaryHeap::new();
    let mut waiting: VecDeque<usize> = VecDeque::new();
    let mut arrival_time = vec![0.0; config.num_tasks];
    let mut busy = false;
    let (mut arrivals, mut departures) = (0usize, 0usize);

    if config.arrival_rate == 0.0 {
        // Each task is injected into an empty system as the previous one leaves.
        let mut clock = 0.0;
        for (s, t) in sojourn.iter_mut().zip(arrival_time.iter_mut()) {
            *t = clock;
            *s = sampler.service_time();
            clock += *s;
        }
        return Trajectory {
            arrival: arrival_time,
            sojourn,
            arrivals: config.num_tasks,
            departures: config.num_tasks,
        };
    }
    events.push(Reverse((
        key(sampler.interarrival()),
        EventKind::Arrival,
        0,
    )));
    while let Some(Reverse((bits, kind, task))) = events.pop() {
        let now = f64::from_bits(bits);
        match kind {
            EventKind::Arrival => {
                arrivals += 1;
                arrival_time[task] = now;
                if task + 1 < config.num_tasks {
                    let next = now + sampler.interarrival();
                    events.push(Reverse((key(next), EventKind::Arrival, task + 1)));
                }
                if busy {
                    waiting.push_back(task);
                } else {
                    busy = true;
                    let done = now + sampler.service_time();
                    events.push(Reverse((key(done), EventKind::Departure, task)));
                }
            }
            EventKind::Departure => {
                departures += 1;
                sojourn[task] = now - arrival_time[task];
                match waiting.pop_front() {
                    Some(next) => {
                        let done = now + sampler.service_time();
                        events.push(Reverse((key(done), EventKind::Departure, next)));
                    }
                    None => busy = false,
                }
            }
        }
    }
    Trajectory {
        arrival: arrival_time,
        sojourn,
        arrivals,
        departures,
    }
}

/// Simulates the queue and reports the mean sojourn time after warm-up.
pub fn simulate(config: &QueueSimConfig) -> Result<SimResult> {
    config.check()?;
    let Trajectory {
        sojourn,
        arrivals,
        departures,
        ..
    } = run(config);
    let counted = &sojourn[config.warmup_tasks..];
    let n = counted.len();
    let mean = counted.iter().sum::<f64>() / n as f64;
    let half_width = if n >= BATCHES {
        let size = n / BATCHES;
        let means: Vec<f64> = (0..BATCHES)
            .map(|b| counted[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
            .collect();
        let grand = means.iter().sum::<f64>() / BATCHES as f64;
        let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (BATCHES - 1) as f64;
        T_QUANTILE_19 * (var / BATCHES as f64).sqrt()
    } else {
        0.0
    };
    Ok(SimResult {
        mean_sojourn: mean,
        half_width_95: half_width,
        tasks_counted: n,
        arrivals,
        departures,
        in_system: arrivals - departures,
    })
}

/// Relative error of the simulated mean against the closed form.
pub fn compare_to_analytic(config: &QueueSimConfig) -> Result<f64> {
    let analytic = config.analytic_mean()?;
    let sim = simulate(config)?;
    Ok((sim.mean_sojourn - analytic).abs() / analytic)
}

/// One labelled configuration of the standard validation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub hit_rate: f64,
    /// Utilization against the simulated branch's service rate.
    pub utilization: f64,
    pub config: QueueSimConfig,
}

/// Cache-search queues at hit rates {0, 0.5, 0.9} and utilizations
/// {0.3, 0.5, 0.8}, followed by an M/M/1 queue with service rate 10 and
/// arrival rate 5. Config `i` uses seed `seed + i`.
pub fn validation_grid(seed: u64, num_tasks: usize) -> Vec<GridPoint> {
    let (cpu, workload, search) = (1e9, 4e8, 2.5e7);
    let mut grid = Vec::new();
    for hit_rate in [0.0, 0.5, 0.9] {
        for utilization in [0.3, 0.5, 0.8] {
            let mu1 = ServiceRates::new(cpu, workload, search, hit_rate).mu1;
            grid.push((
                hit_rate,
                utilization,
                QueueSimConfig::new(
                    utilization * mu1,
                    cpu,
                    workload,
                    search,
                    hit_rate,
                    QueueMode::WithCache,
                    num_tasks,
                    0,
                ),
            ));
        }
    }
    grid.push((
        0.0,
        0.5,
        QueueSimConfig::new(
            5.0,
            4e9,
            workload,
            search,
            0.0,
            QueueMode::NoCache,
            num_tasks,
            0,
        ),
    ));
    grid.into_iter()
        .enumerate()
        .map(|(i, (hit_rate, utilization, config))| GridPoint {
            hit_rate,
            utilization,
            config: QueueSimConfig {
                rng_seed: seed.wrapping_add(i as u64),
                ..config
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mm1(lambda: f64, mu: f64, tasks: usize, seed: u64) -> QueueSimConfig {
        // mu tasks/s with 1e8-cycle tasks on a (mu * 1e8) Hz server.
        QueueSimConfig::new(
            lambda,
            mu * 1e8,
            1e8,
            0.0,
            0.0,
            QueueMode::NoCache,
            tasks,
            seed,
        )
    }

    #[test]
    fn idle_queue_sojourn_is_service_time() {
        let mut c = mm1(0.0, 10.0, 1000, 3);
        c.mode = QueueMode::WithCache;
        c.hit_rate = 1.0;
        c.search_cycles = 2.5e7;
        let r = simulate(&c).unwrap();
        assert!((r.mean_sojourn - 2.5e7 / 1e9).abs() < 1e-15);
        assert!(r.half_width_95 < 1e-12);
    }

    #[test]
    fn mm1_mean_matches_closed_form() {
        let c = mm1(5.0, 10.0, 1_000_000, 42);
        let r = simulate(&c).unwrap();
        assert!(
            (r.mean_sojourn - 0.2).abs() <= r.half_width_95.max(0.004),
            "{r:?}"
        );
        assert!(compare_to_analytic(&c).unwrap() < 0.02);
    }

    #[test]
    fn full_hit_rate_is_md1() {
        let c = QueueSimConfig::new(20.0, 1e9, 4e8, 2.5e7, 1.0, QueueMode::WithCache, 400_000, 9);
        // Deterministic service 0.025 s at rho = 0.5: 1/mu + rho/(2 mu (1 - rho)).
        let analytic = 0.025 + 0.5 / (2.0 * 40.0 * 0.5);
        assert!((c.analytic_mean().unwrap() - analytic).abs() < 1e-12);
        let r = simulate(&c).unwrap();
        assert!((r.mean_sojourn - analytic).abs() / analytic < 0.01, "{r:?}");
    }

    #[test]
    fn unstable_config_rejected() {
        let c = mm1(10.0, 10.0, 1000, 1);
        assert!(matches!(simulate(&c), Err(Error::UnstableConfig { .. })));
        assert!(matches!(
            compare_to_analytic(&c),
            Err(Error::UnstableConfig { .. })
        ));
    }

    #[test]
    fn warmup_must_leave_tasks() {
        let mut c = mm1(1.0, 10.0, 10, 1);
        c.warmup_tasks = 10;
        assert!(matches!(simulate(&c), Err(Error::MalformedInput(_))));
    }

    #[test]
    fn counters_conserve_tasks_and_runs_are_reproducible() {
        let c = mm1(8.0, 10.0, 20_000, 5);
        let a = simulate(&c).unwrap();
        let b = simulate(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.arrivals, a.departures + a.in_system);
        assert_eq!(a.arrivals, 20_000);
        assert_eq!(a.tasks_counted, 18_000);
        let other = simulate(&QueueSimConfig { rng_seed: 6, ..c }).unwrap();
        assert_ne!(a.mean_sojourn, other.mean_sojourn);
    }

    #[test]
    fn fifo_order_and_non_negative_sojourns() {
        let c = mm1(9.0, 10.0, 5_000, 11);
        let t = run(&c);
        assert!(t.sojourn.iter().all(|s| *s > 0.0));
        let departures: Vec<f64> = t
            .arrival
            .iter()
            .zip(&t.sojourn)
            .map(|(a, s)| a + s)
            .collect();
        assert!(t.arrival.windows(2).all(|w| w[1] >= w[0]));
        assert!(departures.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn grid_layout() {
        let grid = validation_grid(7, 1000);
        assert_eq!(grid.len(), 10);
        for g in &grid[..9] {
            let rho = g.config.arrival_rate / g.config.service_rate();
            assert!((rho - g.utilization).abs() < 1e-12);
        }
        let last = grid[9].config;
        assert_eq!(last.mode, QueueMode::NoCache);
        assert!((last.analytic_mean().unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(grid[3].config.rng_seed, 10);
    }

    #[test]
    fn low_load_approaches_service_time() {
        let c = mm1(0.01, 10.0, 200_000, 2);
        let r = simulate(&c).unwrap();
        assert!((r.mean_sojourn - 0.1).abs() < 0.002);
    }
}
