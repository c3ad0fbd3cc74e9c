//! Pulls batches from the queue and routes them into channel mailboxes.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use thiserror::Error;
use tokio::sync::{watch, Notify};

use super::mailbox::BoundedMailbox;
use super::policy::{replenish, should_replenish, ReplenishPolicy, RouterState};
use crate::clock::{self, delta, Clock};
use crate::model::{ChannelKind, QueueMessage};
use crate::monitor::{DeadLetterReason, DeadLetterRecord, Monitor};
use crate::queue::{DualQueue, QueueError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteOutcome {
    Delivered,
    Overflowed,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RouteError {
    #[error("no pool registered for channel {0}")]
    UnknownChannel(ChannelKind),
}

/// Something that acknowledges finished messages.
pub trait Completer: Send + Sync {
    fn complete(&self, message_id: &str);
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct RouterCounters {
    pub routed: u64,
    pub delivered: u64,
    pub overflowed: u64,
    pub unroutable: u64,
    pub completed: u64,
    pub duplicate_completions: u64,
    pub expired_leases: u64,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct PumpReport {
    pub fetched: usize,
    pub delivered: usize,
    pub overflowed: usize,
    pub unroutable: usize,
}

#[derive(Default)]
struct Counters {
    routed: AtomicU64,
    delivered: AtomicU64,
    overflowed: AtomicU64,
    unroutable: AtomicU64,
    completed: AtomicU64,
    duplicate_completions: AtomicU64,
    expired_leases: AtomicU64,
}

struct Inner {
    state: RouterState,
    /// Fetched-but-not-completed message ids and when they were fetched.
    leases: HashMap<String, DateTime<Utc>>,
}

pub struct Router {
    queue: Arc<DualQueue>,
    monitor: Arc<Monitor>,
    clock: Arc<dyn Clock>,
    policy: ReplenishPolicy,
    mailboxes: HashMap<ChannelKind, Arc<BoundedMailbox>>,
    inner: Mutex<Inner>,
    counters: Counters,
    wake: Notify,
}

impl std::fmt::Debug for Router {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Router")
            .field("policy", &self.policy)
            .field("channels", &self.mailboxes.keys().collect::<Vec<_>>())
            .field("counters", &self.counters())
            .finish()
    }
}

impl Router {
    pub fn new(
        policy: ReplenishPolicy,
        queue: Arc<DualQueue>,
        monitor: Arc<Monitor>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let now = clock.now();
        // start due, so the first pump pulls right away
        let mut state = RouterState::new(now);
        state.last_replenish_at = now - delta(policy.timeout_trigger);
        Self {
            queue,
            monitor,
            clock,
            policy,
            mailboxes: HashMap::new(),
            inner: Mutex::new(Inner {
                state,
                leases: HashMap::new(),
            }),
            counters: Counters::default(),
            wake: Notify::new(),
        }
    }

    pub fn with_pool(mut self, channel: ChannelKind, mailbox: Arc<BoundedMailbox>) -> Self {
        self.mailboxes.insert(channel, mailbox);
        self
    }

    pub fn policy(&self) -> &ReplenishPolicy {
        &self.policy
    }

    pub fn mailbox(&self, channel: ChannelKind) -> Option<&Arc<BoundedMailbox>> {
        self.mailboxes.get(&channel)
    }

    pub fn state(&self) -> RouterState {
        self.inner.lock().unwrap().state.clone()
    }

    pub fn outstanding(&self) -> usize {
        self.inner.lock().unwrap().state.outstanding
    }

    pub fn counters(&self) -> RouterCounters {
        let c = &self.counters;
        RouterCounters {
            routed: c.routed.load(Ordering::Relaxed),
            delivered: c.delivered.load(Ordering::Relaxed),
            overflowed: c.overflowed.load(Ordering::Relaxed),
            unroutable: c.unroutable.load(Ordering::Relaxed),
            completed: c.completed.load(Ordering::Relaxed),
            duplicate_completions: c.duplicate_completions.load(Ordering::Relaxed),
            expired_leases: c.expired_leases.load(Ordering::Relaxed),
        }
    }

    /// Places a message in its channel's mailbox. Overflow goes to the
    /// dead-letter sink and gives the message's lease back.
    pub fn route(&self, msg: QueueMessage) -> Result<RouteOutcome, RouteError> {
        self.counters.routed.fetch_add(1, Ordering::Relaxed);
        let Some(mailbox) = self.mailboxes.get(&msg.channel) else {
            self.counters.unroutable.fetch_add(1, Ordering::Relaxed);
            let channel = msg.channel;
            // nothing will ever consume it, so drop it from the queue as well
            if let Err(e) = self.queue.delete(&msg.message_id) {
                tracing::debug!(error = %e, "unroutable message already gone");
            }
            self.release_lease(&msg.message_id);
            self.dead_letter(msg, DeadLetterReason::Unroutable);
            return Err(RouteError::UnknownChannel(channel));
        };
        match mailbox.try_push(msg) {
            Ok(()) => {
                self.counters.delivered.fetch_add(1, Ordering::Relaxed);
                Ok(RouteOutcome::Delivered)
            }
            Err(msg) => {
                self.counters.overflowed.fetch_add(1, Ordering::Relaxed);
                // the queue redelivers it once the visibility timeout lapses
                self.release_lease(&msg.message_id);
                self.dead_letter(msg, DeadLetterReason::MailboxOverflow);
                Ok(RouteOutcome::Overflowed)
            }
        }
    }

    fn dead_letter(&self, message: QueueMessage, reason: DeadLetterReason) {
        self.monitor.record_dead_letter(DeadLetterRecord {
            message,
            reason,
            at: self.clock.now(),
        });
    }

    fn release_lease(&self, message_id: &str) -> bool {
        let mut inner = self.inner.lock().unwrap();
        if inner.leases.remove(message_id).is_some() {
            inner.state.outstanding -= 1;
            true
        } else {
            false
        }
    }

    /// Drops leases older than the queue's visibility timeout. Their
    /// messages are visible again and will come back through a receive.
    pub fn expire_leases(&self, now: DateTime<Utc>) -> usize {
        let cutoff = now - delta(self.queue.config().visibility_timeout);
        let mut inner = self.inner.lock().unwrap();
        let before = inner.leases.len();
        inner.leases.retain(|_, fetched| *fetched > cutoff);
        let expired = before - inner.leases.len();
        inner.state.outstanding -= expired;
        self.counters
            .expired_leases
            .fetch_add(expired as u64, Ordering::Relaxed);
        expired
    }

    /// One router step: expire stale leases, replenish if a trigger fired,
    /// and route whatever was fetched.
    pub fn pump(&self, now: DateTime<Utc>) -> PumpReport {
        self.expire_leases(now);
        let fetched = {
            let mut inner = self.inner.lock().unwrap();
            if !should_replenish(&inner.state, &self.policy, now) {
                return PumpReport::default();
            }
            let batch = replenish(&mut inner.state, &self.policy, &self.queue, now);
            for msg in &batch {
                if inner.leases.insert(msg.message_id.clone(), now).is_some() {
                    // redelivered while we still held a lease on it
                    inner.state.outstanding -= 1;
                }
            }
            batch
        };
        let mut report = PumpReport {
            fetched: fetched.len(),
            ..Default::default()
        };
        for msg in fetched {
            match self.route(msg) {
                Ok(RouteOutcome::Delivered) => report.delivered += 1,
                Ok(RouteOutcome::Overflowed) => report.overflowed += 1,
                Err(_) => report.unroutable += 1,
            }
        }
        report
    }

    /// Pumps until shutdown. Wakes early when enough completions arrive.
    pub async fn run(self: Arc<Self>, mut shutdown: watch::Receiver<bool>) {
        let idle = self.policy.timeout_trigger.max(std::time::Duration::from_millis(1));
        loop {
            if *shutdown.borrow() {
                break;
            }
            let report = self.pump(self.clock.now());
            if report.fetched > 0 {
                tracing::trace!(?report, "router pump");
            }
            let nap = self.clock.to_real(idle);
            tokio::select! {
                _ = self.wake.notified() => {}
                _ = tokio::time::sleep(nap) => {}
                _ = shutdown.changed() => {}
            }
        }
    }

    /// Sleeps on the router's clock; handy for tests on a scaled clock.
    pub async fn sleep(&self, span: std::time::Duration) {
        clock::sleep(self.clock.as_ref(), span).await
    }
}

impl Completer for Router {
    fn complete(&self, message_id: &str) {
        match self.queue.delete(message_id) {
            Ok(()) => {}
            Err(QueueError::NotInFlight(_)) => {
                self.counters
                    .duplicate_completions
                    .fetch_add(1, Ordering::Relaxed);
                tracing::debug!(message_id, "completion for a message no longer in flight");
            }
            Err(e) => tracing::warn!(message_id, error = %e, "delete failed"),
        }
        let mut inner = self.inner.lock().unwrap();
        if inner.leases.remove(message_id).is_some() {
            inner.state.outstanding -= 1;
            inner.state.processed_since_replenish += 1;
            self.counters.completed.fetch_add(1, Ordering::Relaxed);
            if inner.state.processed_since_replenish >= self.policy.processed_trigger {
                drop(inner);
                self.wake.notify_one();
            }
        }
    }
}
