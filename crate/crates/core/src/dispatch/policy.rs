//! When and how much the router pulls from the queue.

use std::time::Duration;

use chrono::{DateTime, Utc};

use crate::clock::delta;
use crate::model::QueueMessage;
use crate::queue::DualQueue;

#[derive(Debug, Clone)]
pub struct ReplenishPolicy {
    /// Messages the router aims to keep fetched-but-not-completed.
    pub target_buffer: usize,
    /// Completions since the last pull that trigger the next one.
    pub processed_trigger: usize,
    /// Pull anyway once this much time has passed since the last pull.
    pub timeout_trigger: Duration,
    /// Largest single receive call.
    pub batch_max: usize,
}

impl Default for ReplenishPolicy {
    fn default() -> Self {
        Self {
            target_buffer: 100,
            processed_trigger: 25,
            timeout_trigger: Duration::from_secs(2),
            batch_max: 10,
        }
    }
}

impl ReplenishPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_max == 0 {
            return Err("batch_max must be at least 1".into());
        }
        if self.processed_trigger > self.target_buffer {
            return Err("processed_trigger must not exceed target_buffer".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouterState {
    pub outstanding: usize,
    pub processed_since_replenish: usize,
    pub last_replenish_at: DateTime<Utc>,
}

impl RouterState {
    pub fn new(now: DateTime<Utc>) -> Self {
        Self {
            outstanding: 0,
            processed_since_replenish: 0,
            last_replenish_at: now,
        }
    }
}

pub fn should_replenish(state: &RouterState, policy: &ReplenishPolicy, now: DateTime<Utc>) -> bool {
    state.processed_since_replenish >= policy.processed_trigger
        || now - state.last_replenish_at >= delta(policy.timeout_trigger)
}

/// Tops the buffer up to `target_buffer` using receive calls of at most
/// `batch_max` messages each.
pub fn replenish(
    state: &mut RouterState,
    policy: &ReplenishPolicy,
    queue: &DualQueue,
    now: DateTime<Utc>,
) -> Vec<QueueMessage> {
    let shortfall = policy.target_buffer.saturating_sub(state.outstanding);
    let mut fetched = Vec::with_capacity(shortfall);
    while fetched.len() < shortfall {
        let want = (shortfall - fetched.len()).min(policy.batch_max);
        let batch = queue.receive(want, now);
        let short = batch.len() < want;
        fetched.extend(batch);
        if short {
            break;
        }
    }
    state.processed_since_replenish = 0;
    state.last_replenish_at = now;
    state.outstanding += fetched.len();
    fetched
}
