//! Discrete-event model of a worker pool in front of a contended
//! downstream, for evaluating the resizer without wall-clock time.
//!
//! Arrivals are Poisson. Service times are Erlang-k. The downstream admits
//! at most `concurrency_limit` requests at once, and every worker beyond
//! that limit slows all service by `contention` (lock and connection churn),
//! so pool capacity is
//! `min(c, K) / mean_service / (1 + contention * max(0, c - K))`.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma};

use super::resizer::{resize_epoch, PoolStats, ResizerConfig};

#[derive(Debug, Clone)]
pub struct ContendedWorkload {
    /// Offered load, messages per second.
    pub arrival_rate: f64,
    pub mean_service: Duration,
    /// Erlang shape of the service time.
    pub erlang_k: u32,
    pub concurrency_limit: usize,
    pub contention: f64,
    /// Mailbox bound; arrivals beyond it are dropped.
    pub backlog_capacity: usize,
}

impl Default for ContendedWorkload {
    fn default() -> Self {
        Self {
            arrival_rate: 60.0,
            mean_service: Duration::from_millis(100),
            erlang_k: 4,
            concurrency_limit: 5,
            contention: 0.05,
            backlog_capacity: 256,
        }
    }
}

impl ContendedWorkload {
    fn slowdown(&self, size: usize) -> f64 {
        1.0 + self.contention * size.saturating_sub(self.concurrency_limit) as f64
    }

    /// Saturated throughput of a pool of `size` workers, per second.
    pub fn capacity(&self, size: usize) -> f64 {
        let servers = size.min(self.concurrency_limit) as f64;
        servers / self.mean_service.as_secs_f64() / self.slowdown(size)
    }

    /// Size with the highest analytic capacity in `1..=max` (smallest on ties).
    pub fn analytic_optimum(&self, max: usize) -> usize {
        (1..=max).fold(1, |best, c| if self.capacity(c) > self.capacity(best) { c } else { best })
    }
}

/// Stateful simulation that can be advanced one epoch at a time with a
/// changing pool size.
pub struct PoolSim {
    workload: ContendedWorkload,
    rng: ChaCha8Rng,
    arrivals: Exp<f64>,
    now: f64,
    next_arrival: f64,
    backlog: usize,
    in_service: BinaryHeap<Reverse<Ticks>>,
    pub dropped: u64,
}

/// Event time in nanoseconds, so the heap has a total order.
type Ticks = u64;

fn ticks(secs: f64) -> Ticks {
    (secs * 1e9) as Ticks
}

impl PoolSim {
    pub fn new(workload: ContendedWorkload, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arrivals = Exp::new(workload.arrival_rate).expect("positive arrival rate");
        let next_arrival = arrivals.sample(&mut rng);
        Self {
            workload,
            rng,
            arrivals,
            now: 0.0,
            next_arrival,
            backlog: 0,
            in_service: BinaryHeap::new(),
            dropped: 0,
        }
    }

    fn service_time(&mut self, size: usize) -> f64 {
        let k = self.workload.erlang_k.max(1) as f64;
        let mean = self.workload.mean_service.as_secs_f64() * self.workload.slowdown(size);
        Gamma::new(k, mean / k).expect("valid erlang").sample(&mut self.rng)
    }

    fn start_jobs(&mut self, size: usize) {
        let servers = size.min(self.workload.concurrency_limit);
        while self.backlog > 0 && self.in_service.len() < servers {
            self.backlog -= 1;
            let done = self.now + self.service_time(size);
            self.in_service.push(Reverse(ticks(done)));
        }
    }

    /// Runs `span` of simulated time at pool size `size`; returns completions.
    pub fn run_epoch(&mut self, size: usize, span: Duration) -> u64 {
        let end = self.now + span.as_secs_f64();
        let mut completed = 0;
        self.start_jobs(size);
        loop {
            let next_done = self.in_service.peek().map(|Reverse(t)| *t as f64 / 1e9);
            let (t, is_arrival) = match next_done {
                Some(d) if d <= self.next_arrival => (d, false),
                _ => (self.next_arrival, true),
            };
            if t > end {
                break;
            }
            self.now = t;
            if is_arrival {
                if self.backlog >= self.workload.backlog_capacity {
                    self.dropped += 1;
                } else {
                    self.backlog += 1;
                }
                self.next_arrival = self.now + self.arrivals.sample(&mut self.rng);
            } else {
                self.in_service.pop();
                completed += 1;
            }
            self.start_jobs(size);
        }
        self.now = end;
        completed
    }
}

/// Throughput of each fixed size, measured after a warmup.
pub fn sweep(
    workload: &ContendedWorkload,
    sizes: impl IntoIterator<Item = usize>,
    measure: Duration,
    seed: u64,
) -> Vec<(usize, f64)> {
    sizes
        .into_iter()
        .map(|size| {
            let mut sim = PoolSim::new(workload.clone(), seed ^ size as u64);
            sim.run_epoch(size, Duration::from_secs(30));
            let done = sim.run_epoch(size, measure);
            (size, done as f64 / measure.as_secs_f64())
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Convergence {
    /// Pool size at the start of each epoch.
    pub trajectory: Vec<usize>,
    /// What an exploit step would choose after the last epoch.
    pub converged_size: usize,
}

/// Lets the resizer drive a simulated pool for `epochs` windows.
pub fn converge(
    workload: &ContendedWorkload,
    config: ResizerConfig,
    initial_size: usize,
    epochs: usize,
    window: Duration,
    seed: u64,
) -> Convergence {
    let mut sim = PoolSim::new(workload.clone(), seed);
    let mut stats = PoolStats::new(config, initial_size);
    let mut trajectory = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        trajectory.push(stats.current_size);
        let done = sim.run_epoch(stats.current_size, window);
        resize_epoch(&mut stats, done, window);
    }
    Convergence {
        converged_size: stats.best_size().unwrap_or(stats.current_size),
        trajectory,
    }
}
