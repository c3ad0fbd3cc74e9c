//! One message, start to finish.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::clock::Clock;
use crate::dispatch::{handler, Completer, Handler};
use crate::model::QueueMessage;
use crate::monitor::{Metric, Monitor};
use crate::store::{MarkUpdate, Outcome, Store, StoreError, Validators};

use super::fetch::{FailReason, FetchOutcome, Fetcher};
use super::parse::{parse_feed, ParseError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProcessFailure {
    Fetch(FailReason),
    Parse(ParseError),
    Store(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProcessOutcome {
    pub items_new: usize,
    pub items_seen: usize,
    pub not_modified: bool,
    pub failed: Option<ProcessFailure>,
    /// The stream was gone; nothing was written.
    pub unknown_stream: bool,
    /// The mark was refused because another delivery already settled it.
    pub already_marked: bool,
    /// A fault hook stopped processing early.
    pub dropped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultAction {
    Proceed,
    /// Lose the message before any store write, like a crashed worker.
    DropBeforeMark,
    /// Write the result but never acknowledge the message.
    DropBeforeComplete,
    /// Acknowledge without any store write: the message is gone and the
    /// stream stays `InProcess` until the stale sweep re-picks it.
    AckWithoutMark,
}

/// Test seam for simulating worker crashes.
pub trait FaultInjector: Send + Sync {
    fn on_message(&self, msg: &QueueMessage) -> FaultAction;
}

#[derive(Debug, Default)]
pub struct WorkerStats {
    pub processed: AtomicU64,
    pub not_modified: AtomicU64,
    pub failed: AtomicU64,
    pub items_new: AtomicU64,
    pub dropped: AtomicU64,
    pub unknown_stream: AtomicU64,
}

impl WorkerStats {
    pub fn get(&self, f: impl Fn(&Self) -> &AtomicU64) -> u64 {
        f(self).load(Ordering::Relaxed)
    }
}

pub struct Worker {
    store: Store,
    fetcher: Fetcher,
    monitor: Arc<Monitor>,
    clock: Arc<dyn Clock>,
    completer: Arc<dyn Completer>,
    faults: Option<Arc<dyn FaultInjector>>,
    stats: Arc<WorkerStats>,
}

impl Worker {
    pub fn new(
        store: Store,
        fetcher: Fetcher,
        monitor: Arc<Monitor>,
        clock: Arc<dyn Clock>,
        completer: Arc<dyn Completer>,
    ) -> Self {
        Self {
            store,
            fetcher,
            monitor,
            clock,
            completer,
            faults: None,
            stats: Arc::new(WorkerStats::default()),
        }
    }

    pub fn with_faults(mut self, faults: Arc<dyn FaultInjector>) -> Self {
        self.faults = Some(faults);
        self
    }

    /// Shares counters with other workers.
    pub fn with_stats(mut self, stats: Arc<WorkerStats>) -> Self {
        self.stats = stats;
        self
    }

    pub fn stats(&self) -> &Arc<WorkerStats> {
        &self.stats
    }

    pub fn into_handler(self) -> Handler {
        let me = Arc::new(self);
        handler(move |msg| {
            let me = me.clone();
            async move {
                me.process_message(msg).await;
            }
        })
    }

    /// Fetches, parses and stores one stream, then records exactly one
    /// mark and one completion, in that order.
    pub async fn process_message(&self, msg: QueueMessage) -> ProcessOutcome {
        let fault = self
            .faults
            .as_ref()
            .map_or(FaultAction::Proceed, |f| f.on_message(&msg));
        if matches!(fault, FaultAction::DropBeforeMark | FaultAction::AckWithoutMark) {
            self.stats.dropped.fetch_add(1, Ordering::Relaxed);
            if fault == FaultAction::AckWithoutMark {
                self.completer.complete(&msg.message_id);
            }
            return ProcessOutcome {
                dropped: true,
                ..Default::default()
            };
        }

        let mut out = ProcessOutcome::default();
        match self.store.get_stream(&msg.stream_id) {
            Err(StoreError::UnknownStream(_)) => {
                tracing::info!(stream = %msg.stream_id, "stream deleted before processing");
                self.stats.unknown_stream.fetch_add(1, Ordering::Relaxed);
                out.unknown_stream = true;
            }
            Err(e) => {
                tracing::warn!(stream = %msg.stream_id, error = %e, "could not load stream");
                out.failed = Some(ProcessFailure::Store(e.to_string()));
            }
            Ok(stream) => {
                let fetched = self
                    .fetcher
                    .fetch_for(msg.channel, &stream.url, stream.etag.as_deref(), stream.last_modified.as_deref())
                    .await;
                let permanent = fetched.permanent_url.clone();
                let (outcome, validators) = match fetched.outcome {
                    FetchOutcome::NotModified => {
                        out.not_modified = true;
                        (Outcome::Processed, None)
                    }
                    FetchOutcome::Failed(reason) => {
                        out.failed = Some(ProcessFailure::Fetch(reason));
                        (Outcome::Failed, None)
                    }
                    FetchOutcome::Modified {
                        body,
                        charset,
                        etag,
                        last_modified,
                    } => match self.ingest(&msg.stream_id, &body, charset.as_deref(), &mut out) {
                        Ok(()) => (Outcome::Processed, Some(Validators { etag, last_modified })),
                        Err(f) => {
                            out.failed = Some(f);
                            (Outcome::Failed, None)
                        }
                    },
                };
                let update = MarkUpdate {
                    validators,
                    url: permanent,
                };
                match self.store.mark_processed(&msg.stream_id, outcome, self.clock.now(), update) {
                    Ok(_) => {}
                    Err(StoreError::IllegalTransition { from, .. }) => {
                        tracing::debug!(stream = %msg.stream_id, ?from, "stream already settled");
                        out.already_marked = true;
                    }
                    Err(StoreError::UnknownStream(_)) => {
                        tracing::info!(stream = %msg.stream_id, "stream deleted during processing");
                        out.unknown_stream = true;
                    }
                    Err(e) => {
                        tracing::warn!(stream = %msg.stream_id, error = %e, "mark failed");
                        out.failed.get_or_insert(ProcessFailure::Store(e.to_string()));
                    }
                }
            }
        }

        if out.not_modified {
            self.stats.not_modified.fetch_add(1, Ordering::Relaxed);
        }
        if out.failed.is_some() {
            self.stats.failed.fetch_add(1, Ordering::Relaxed);
        }
        self.stats.items_new.fetch_add(out.items_new as u64, Ordering::Relaxed);
        self.stats.processed.fetch_add(1, Ordering::Relaxed);

        if fault == FaultAction::DropBeforeComplete {
            self.stats.dropped.fetch_add(1, Ordering::Relaxed);
            out.dropped = true;
            return out;
        }
        self.completer.complete(&msg.message_id);
        out
    }

    fn ingest(
        &self,
        stream_id: &str,
        body: &[u8],
        charset: Option<&str>,
        out: &mut ProcessOutcome,
    ) -> Result<(), ProcessFailure> {
        let feed = parse_feed(body, charset).map_err(ProcessFailure::Parse)?;
        let now = self.clock.now();
        let items = feed.into_feed_items(stream_id, now);
        out.items_seen = items.len();
        let new = self
            .store
            .insert_items_dedup(&items)
            .map_err(|e| ProcessFailure::Store(e.to_string()))?;
        out.items_new = new;
        if new > 0 {
            self.monitor.record(Metric::ItemsIngested, now, new as u64);
        }
        Ok(())
    }
}
