//! Periodic picker: every tick claims due and stale streams from the store
//! and enqueues one message per (stream, channel).

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::Serialize;
use thiserror::Error;
use tokio::sync::watch;

use crate::clock::Clock;
use crate::model::{FeedStream, MessageClass, QueueMessage};
use crate::monitor::{DeadLetterReason, DeadLetterRecord, Monitor};
use crate::queue::{DualQueue, QueueError};
use crate::store::{Store, StoreError};

#[derive(Debug, Clone)]
pub struct SchedulerConfig {
    pub tick_interval: Duration,
    /// Defaults to `tick_interval`; anything shorter can skip streams that
    /// fall due between ticks.
    pub pick_horizon: Duration,
    pub pick_limit: usize,
    pub stale_after: Duration,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            tick_interval: Duration::from_secs(5),
            pick_horizon: Duration::from_secs(5),
            pick_limit: 1000,
            stale_after: Duration::from_secs(15 * 60),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TickReport {
    pub picked: usize,
    pub enqueued: usize,
    pub recovered: usize,
    /// Streams claimed this tick but released because the queue was full.
    pub shortfall: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickOutcome {
    Ran(TickReport),
    /// Another tick was still running.
    Skipped,
}

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Queue(#[from] QueueError),
}

pub struct Scheduler {
    config: SchedulerConfig,
    store: Store,
    queue: Arc<DualQueue>,
    monitor: Arc<Monitor>,
    running: AtomicBool,
    skipped: AtomicU64,
    rejected: AtomicU64,
}

impl std::fmt::Debug for Scheduler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scheduler").field("config", &self.config).finish()
    }
}

struct RunningGuard<'a>(&'a AtomicBool);

impl Drop for RunningGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

fn messages_for(stream: &FeedStream, class: MessageClass, now: DateTime<Utc>) -> Vec<QueueMessage> {
    stream
        .channels
        .iter()
        .map(|&channel| QueueMessage::new(stream.id.clone(), channel, class, now))
        .collect()
}

impl Scheduler {
    pub fn new(config: SchedulerConfig, store: Store, queue: Arc<DualQueue>, monitor: Arc<Monitor>) -> Self {
        Self {
            config,
            store,
            queue,
            monitor,
            running: AtomicBool::new(false),
            skipped: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn skipped_ticks(&self) -> u64 {
        self.skipped.load(Ordering::Relaxed)
    }

    /// Messages refused by a full queue, over the scheduler's lifetime.
    pub fn queue_full_rejections(&self) -> u64 {
        self.rejected.load(Ordering::Relaxed)
    }

    pub fn tick(&self, now: DateTime<Utc>) -> Result<TickOutcome, StoreError> {
        if self.running.swap(true, Ordering::AcqRel) {
            self.skipped.fetch_add(1, Ordering::Relaxed);
            return Ok(TickOutcome::Skipped);
        }
        let _guard = RunningGuard(&self.running);
        self.monitor.roll(now);

        let due = self
            .store
            .pick_due_streams(now, self.config.pick_horizon, self.config.pick_limit)?;
        let stale = self
            .store
            .recover_stale(now, self.config.stale_after, self.config.pick_limit)?;
        let mut report = TickReport {
            picked: due.len(),
            recovered: stale.len(),
            ..Default::default()
        };
        if !stale.is_empty() {
            tracing::info!(count = stale.len(), "re-picked stale streams");
        }

        let mut streams = due.into_iter().chain(stale);
        for stream in streams.by_ref() {
            let msgs = messages_for(&stream, MessageClass::Main, now);
            let n = msgs.len();
            match self.queue.send_batch(msgs.clone()) {
                Ok(_) => report.enqueued += n,
                Err(QueueError::QueueFull { .. }) => {
                    self.rejected.fetch_add(n as u64, Ordering::Relaxed);
                    for message in msgs {
                        self.monitor.record_dead_letter(DeadLetterRecord {
                            message,
                            reason: DeadLetterReason::QueueFull,
                            at: now,
                        });
                    }
                    self.release(&stream, now)?;
                    report.shortfall += 1;
                    break;
                }
                Err(QueueError::NotInFlight(_)) => unreachable!("send never reports NotInFlight"),
            }
        }
        for stream in streams {
            self.release(&stream, now)?;
            report.shortfall += 1;
        }
        if report.shortfall > 0 {
            tracing::warn!(shortfall = report.shortfall, "queue full; released streams for the next tick");
        }
        Ok(TickOutcome::Ran(report))
    }

    fn release(&self, stream: &FeedStream, now: DateTime<Utc>) -> Result<(), StoreError> {
        self.store.release(&stream.id, stream.picked_at.unwrap_or(now)).map(|_| ())
    }

    /// Claims `stream_id` immediately and sends priority-class messages for
    /// each of its channels.
    pub fn prioritize(&self, stream_id: &str, now: DateTime<Utc>) -> Result<usize, SchedulerError> {
        let stream = self.store.force_pick(stream_id, now)?;
        let msgs = messages_for(&stream, MessageClass::Priority, now);
        match self.queue.send_batch(msgs) {
            Ok(ids) => Ok(ids.len()),
            Err(err) => {
                self.store.release(stream_id, now)?;
                Err(err.into())
            }
        }
    }

    /// Ticks every `tick_interval` of clock time until `shutdown` flips.
    pub async fn run(self: Arc<Self>, clock: Arc<dyn Clock>, mut shutdown: watch::Receiver<bool>) {
        let mut interval = tokio::time::interval(clock.to_real(self.config.tick_interval));
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
        loop {
            tokio::select! {
                _ = interval.tick() => {}
                _ = shutdown.changed() => {}
            }
            if *shutdown.borrow() {
                break;
            }
            let this = self.clone();
            let now = clock.now();
            let result = tokio::task::spawn_blocking(move || this.tick(now)).await;
            match result {
                Ok(Ok(TickOutcome::Ran(report))) => {
                    if report.picked + report.recovered > 0 {
                        tracing::debug!(?report, "tick");
                    }
                }
                Ok(Ok(TickOutcome::Skipped)) => tracing::warn!("tick overran; skipped"),
                Ok(Err(err)) => tracing::error!(error = %err, "tick aborted"),
                Err(err) => tracing::error!(error = %err, "tick panicked"),
            }
        }
    }
}
