//! Throughput-seeking pool resizer.
//!
//! Once per adjustment window the pool records how many messages it
//! completed at its current size. With probability `explore_probability` the
//! next size is a random step away from the current one; otherwise the pool
//! jumps to the size with the best throughput in the recent history
//! (smaller size wins ties).

use std::collections::VecDeque;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct ResizerConfig {
    pub min_size: usize,
    pub max_size: usize,
    pub explore_probability: f64,
    pub history_len: usize,
    pub rng_seed: u64,
}

impl Default for ResizerConfig {
    fn default() -> Self {
        Self {
            min_size: 1,
            max_size: 64,
            explore_probability: 0.4,
            history_len: 16,
            rng_seed: 0x5eed,
        }
    }
}

impl ResizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(format!("invalid pool bounds [{}, {}]", self.min_size, self.max_size));
        }
        if !(0.0..=1.0).contains(&self.explore_probability) {
            return Err("explore_probability must be within [0, 1]".into());
        }
        if self.history_len == 0 {
            return Err("history must hold at least one window".into());
        }
        Ok(())
    }

    /// Largest exploration step: a tenth of the size range, at least 1.
    pub fn max_step(&self) -> usize {
        let range = (self.max_size - self.min_size) as f64;
        ((0.1 * range).ceil() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub size: usize,
    pub completed: u64,
    pub window: Duration,
}

impl Sample {
    pub fn throughput(&self) -> f64 {
        self.completed as f64 / self.window.as_secs_f64()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Explore,
    Exploit,
}

#[derive(Debug, Clone)]
pub struct PoolStats {
    pub current_size: usize,
    config: ResizerConfig,
    history: VecDeque<Sample>,
    rng: ChaCha8Rng,
    last_decision: Option<Decision>,
}

impl PoolStats {
    pub fn new(config: ResizerConfig, initial_size: usize) -> Self {
        let current_size = initial_size.clamp(config.min_size, config.max_size);
        Self {
            current_size,
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            history: VecDeque::with_capacity(config.history_len),
            config,
            last_decision: None,
        }
    }

    pub fn config(&self) -> &ResizerConfig {
        &self.config
    }

    pub fn history(&self) -> impl Iterator<Item = &Sample> {
        self.history.iter()
    }

    pub fn last_decision(&self) -> Option<Decision> {
        self.last_decision
    }

    /// The size an exploit step would choose right now.
    pub fn best_size(&self) -> Option<usize> {
        best_in(self.history.iter())
    }

    fn clamp(&self, size: usize) -> usize {
        size.clamp(self.config.min_size, self.config.max_size)
    }
}

fn best_in<'a>(samples: impl Iterator<Item = &'a Sample>) -> Option<usize> {
    samples
        .fold(None::<(f64, usize)>, |best, s| {
            let t = s.throughput();
            match best {
                Some((bt, bs)) if bt > t || (bt == t && bs <= s.size) => Some((bt, bs)),
                _ => Some((t, s.size)),
            }
        })
        .map(|(_, size)| size)
}

/// Records the window that just ended and returns the pool's next size.
pub fn resize_epoch(stats: &mut PoolStats, completed_in_window: u64, window: Duration) -> usize {
    if stats.history.len() == stats.config.history_len {
        stats.history.pop_front();
    }
    stats.history.push_back(Sample {
        size: stats.current_size,
        completed: completed_in_window,
        window,
    });

    let explore = stats.rng.random_bool(stats.config.explore_probability);
    let next = if explore {
        let step = stats.rng.random_range(1..=stats.config.max_step());
        let up = stats.rng.random_bool(0.5);
        let target = if up {
            stats.current_size.saturating_add(step)
        } else {
            stats.current_size.saturating_sub(step)
        };
        stats.last_decision = Some(Decision::Explore);
        target
    } else {
        stats.last_decision = Some(Decision::Exploit);
        stats.best_size().unwrap_or(stats.current_size)
    };
    stats.current_size = stats.clamp(next);
    stats.current_size
}
