//! Deterministic synthetic feed source.
//!
//! A [`SimScenario`] fixes everything about the simulated feeds: how many
//! items each poll produces, how often already-seen items reappear, which
//! validators the server honors, redirect depth, and injected faults. The
//! content of poll `p` of feed `i` depends only on the scenario, so
//! [`expected_items`] can replay it without a server.

mod render;
mod server;

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use render::{render_feed, sim_item, SimItem, SIM_HOST};
pub use server::{write_log_jsonl, RequestRecord, SimServer, StartupError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemsPerPoll {
    Constant(u32),
    Poisson(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidatorMode {
    HonorEtag,
    HonorLastModified,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Never answers; the client's timeout fires.
    Timeout,
    Http500,
    /// Sends headers and part of the body, then drops the connection.
    MidBodyCut,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceDelay {
    ConstantMs(u64),
    UniformMs(u64, u64),
}

impl Default for ServiceDelay {
    fn default() -> Self {
        ServiceDelay::ConstantMs(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimFormat {
    #[default]
    Rss2,
    Atom,
    /// Even feeds RSS, odd feeds Atom.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub feed_count: usize,
    pub items_per_poll: ItemsPerPoll,
    pub validator_mode: ValidatorMode,
    #[serde(default)]
    pub redirect_hops: u32,
    #[serde(default)]
    pub duplicate_fraction: f64,
    #[serde(default)]
    pub fault: Option<FaultSpec>,
    #[serde(default)]
    pub service_delay: ServiceDelay,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub feed_format: SimFormat,
}

impl Default for SimScenario {
    fn default() -> Self {
        Self {
            feed_count: 10,
            items_per_poll: ItemsPerPoll::Constant(5),
            validator_mode: ValidatorMode::HonorEtag,
            redirect_hops: 0,
            duplicate_fraction: 0.0,
            fault: None,
            service_delay: ServiceDelay::default(),
            rng_seed: 0,
            feed_format: SimFormat::Rss2,
        }
    }
}

impl SimScenario {
    pub fn validate(&self) -> Result<(), String> {
        if self.redirect_hops > 6 {
            return Err("redirect_hops must be within 0..=6".into());
        }
        if !(0.0..=1.0).contains(&self.duplicate_fraction) {
            return Err("duplicate_fraction must be within [0, 1]".into());
        }
        if let ItemsPerPoll::Poisson(l) = self.items_per_poll {
            if !(l > 0.0 && l.is_finite()) {
                return Err("poisson rate must be positive".into());
            }
        }
        if let Some(f) = self.fault {
            if !(0.0..=1.0).contains(&f.probability) {
                return Err("fault probability must be within [0, 1]".into());
            }
        }
        if let ServiceDelay::UniformMs(lo, hi) = self.service_delay {
            if lo > hi {
                return Err("service delay bounds are reversed".into());
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, String> {
        let sc: Self = serde_json::from_str(s).map_err(|e| e.to_string())?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn format_of(&self, feed: usize) -> crate::worker::FeedFormat {
        use crate::worker::FeedFormat;
        match self.feed_format {
            SimFormat::Rss2 => FeedFormat::Rss2,
            SimFormat::Atom => FeedFormat::Atom,
            SimFormat::Mixed if feed % 2 == 0 => FeedFormat::Rss2,
            SimFormat::Mixed => FeedFormat::Atom,
        }
    }
}

/// Independent RNG stream for one (feed, counter, purpose) triple.
pub(crate) fn stream_rng(seed: u64, feed: usize, counter: u64, purpose: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((feed as u64).to_le_bytes());
    h.update(counter.to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&d);
    ChaCha8Rng::from_seed(key)
}

/// Items served by one poll: the contiguous index range
/// `first..first + count`. Repeats come first, then new items.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PollContent {
    pub poll: u64,
    pub first: u64,
    pub repeated: u64,
    pub new: u64,
}

impl PollContent {
    pub fn indices(&self) -> std::ops::Range<u64> {
        self.first..self.first + self.repeated + self.new
    }
}

/// Replays the content sequence of one feed.
#[derive(Debug, Clone)]
pub struct FeedGen {
    feed: usize,
    poll: u64,
    next_new: u64,
    emitted_after_first: u64,
    repeated_total: u64,
}

impl FeedGen {
    pub fn new(feed: usize) -> Self {
        Self {
            feed,
            poll: 0,
            next_new: 0,
            emitted_after_first: 0,
            repeated_total: 0,
        }
    }

    /// Number of distinct items produced so far.
    pub fn distinct(&self) -> u64 {
        self.next_new
    }

    pub fn poll(&self) -> u64 {
        self.poll
    }

    fn poll_size(&self, sc: &SimScenario) -> u64 {
        match sc.items_per_poll {
            ItemsPerPoll::Constant(n) => n as u64,
            ItemsPerPoll::Poisson(lambda) => {
                let mut rng = stream_rng(sc.rng_seed, self.feed, self.poll, "items");
                Poisson::new(lambda).map(|p| p.sample(&mut rng) as u64).unwrap_or(0)
            }
        }
    }

    /// Content of the current poll, without advancing.
    pub fn peek(&self, sc: &SimScenario) -> PollContent {
        let n = self.poll_size(sc);
        let repeated = if self.poll == 0 {
            0
        } else {
            let target = (sc.duplicate_fraction * (self.emitted_after_first + n) as f64).floor() as u64;
            target
                .saturating_sub(self.repeated_total)
                .min(n)
                .min(self.next_new)
        };
        PollContent {
            poll: self.poll,
            first: self.next_new - repeated,
            repeated,
            new: n - repeated,
        }
    }

    pub fn advance(&mut self, sc: &SimScenario) -> PollContent {
        let c = self.peek(sc);
        if self.poll > 0 {
            self.emitted_after_first += c.repeated + c.new;
        }
        self.repeated_total += c.repeated;
        self.next_new += c.new;
        self.poll += 1;
        c
    }
}

/// Distinct items a pipeline should hold after polling every feed `polls`
/// times.
pub fn expected_items(scenario: &SimScenario, polls: u64) -> u64 {
    (0..scenario.feed_count)
        .map(|i| {
            let mut g = FeedGen::new(i);
            for _ in 0..polls {
                g.advance(scenario);
            }
            g.distinct()
        })
        .sum()
}

pub(crate) fn sample_delay(sc: &SimScenario, feed: usize, request: u64) -> Duration {
    match sc.service_delay {
        ServiceDelay::ConstantMs(ms) => Duration::from_millis(ms),
        ServiceDelay::UniformMs(lo, hi) => {
            let mut rng = stream_rng(sc.rng_seed, feed, request, "delay");
            Duration::from_millis(rng.random_range(lo..=hi))
        }
    }
}

pub(crate) fn sample_fault(sc: &SimScenario, feed: usize, request: u64) -> Option<FaultKind> {
    let f = sc.fault?;
    let mut rng = stream_rng(sc.rng_seed, feed, request, "fault");
    rng.random_bool(f.probability).then_some(f.kind)
}
