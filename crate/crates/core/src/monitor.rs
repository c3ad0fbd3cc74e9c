//! Dead-letter capture and fixed-window throughput metrics.
//!
//! Counters land in clock-aligned buckets (five minutes by default). A
//! bucket closes when the clock passes its end; closing evaluates the
//! dead-letter alert for that bucket exactly once.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use url::Url;

use crate::clock::Clock;
use crate::model::QueueMessage;

#[derive(Debug, Clone)]
pub struct MonitorConfig {
    pub window: Duration,
    pub alert_threshold: u64,
    pub ring_capacity: usize,
    pub alert_webhook_url: Option<Url>,
    /// Closed buckets kept for snapshots.
    pub retain_buckets: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            window: Duration::from_secs(300),
            alert_threshold: 100,
            ring_capacity: 10_000,
            alert_webhook_url: None,
            retain_buckets: 8_640,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeadLetterReason {
    MailboxOverflow,
    QueueFull,
    Unroutable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadLetterRecord {
    pub message: QueueMessage,
    pub reason: DeadLetterReason,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsBucket {
    pub window_start: DateTime<Utc>,
    #[serde(with = "crate::model::secs")]
    pub window: Duration,
    pub sent: u64,
    pub received: u64,
    pub deleted: u64,
    pub dead_lettered: u64,
    pub items_ingested: u64,
}

impl MetricsBucket {
    fn empty(window_start: DateTime<Utc>, window: Duration) -> Self {
        Self {
            window_start,
            window,
            sent: 0,
            received: 0,
            deleted: 0,
            dead_lettered: 0,
            items_ingested: 0,
        }
    }

    pub fn sent_rate(&self) -> f64 {
        self.sent as f64 / self.window.as_secs_f64()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Sent,
    Received,
    Deleted,
    ItemsIngested,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub reason: String,
    pub bucket: DateTime<Utc>,
    pub count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub sent: u64,
    pub received: u64,
    pub deleted: u64,
    pub dead_lettered: u64,
    pub items_ingested: u64,
}

/// Fires when a bucket saw strictly more dead letters than `threshold`.
pub fn check_alert(window_dead_letters: u64, threshold: u64) -> Option<u64> {
    (window_dead_letters > threshold).then_some(window_dead_letters)
}

struct State {
    open: MetricsBucket,
    closed: VecDeque<MetricsBucket>,
    ring: VecDeque<DeadLetterRecord>,
    by_reason: BTreeMap<&'static str, u64>,
    totals: Totals,
    alerts: Vec<Alert>,
}

pub struct Monitor {
    config: MonitorConfig,
    clock: Arc<dyn Clock>,
    state: Mutex<State>,
    http: Option<reqwest::Client>,
}

impl std::fmt::Debug for Monitor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Monitor").field("config", &self.config).finish()
    }
}

fn align(at: DateTime<Utc>, window: Duration) -> DateTime<Utc> {
    let w = window.as_secs().max(1) as i64;
    let secs = at.timestamp().div_euclid(w) * w;
    Utc.timestamp_opt(secs, 0).single().expect("aligned timestamp in range")
}

impl Monitor {
    pub fn new(config: MonitorConfig, clock: Arc<dyn Clock>) -> Self {
        assert!(config.window.as_secs() >= 1, "metrics window must be at least 1s");
        let open = MetricsBucket::empty(align(clock.now(), config.window), config.window);
        let http = config.alert_webhook_url.as_ref().map(|_| reqwest::Client::new());
        Self {
            state: Mutex::new(State {
                open,
                closed: VecDeque::new(),
                ring: VecDeque::new(),
                by_reason: BTreeMap::new(),
                totals: Totals::default(),
                alerts: Vec::new(),
            }),
            config,
            clock,
            http,
        }
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn record(&self, metric: Metric, at: DateTime<Utc>, n: u64) {
        let mut state = self.state.lock().unwrap();
        self.roll_locked(&mut state, at);
        // Late events (timestamped inside an already-closed bucket) count
        // toward the open one so closed buckets never change.
        let bucket = &mut state.open;
        match metric {
            Metric::Sent => bucket.sent += n,
            Metric::Received => bucket.received += n,
            Metric::Deleted => bucket.deleted += n,
            Metric::ItemsIngested => bucket.items_ingested += n,
        }
        let totals = &mut state.totals;
        match metric {
            Metric::Sent => totals.sent += n,
            Metric::Received => totals.received += n,
            Metric::Deleted => totals.deleted += n,
            Metric::ItemsIngested => totals.items_ingested += n,
        }
    }

    pub fn record_dead_letter(&self, rec: DeadLetterRecord) {
        tracing::warn!(
            target: "feedmix::dead_letters",
            message_id = %rec.message.message_id,
            stream_id = %rec.message.stream_id,
            channel = %rec.message.channel,
            reason = ?rec.reason,
            at = %rec.at.to_rfc3339(),
            "dead letter"
        );
        let mut state = self.state.lock().unwrap();
        self.roll_locked(&mut state, rec.at);
        state.open.dead_lettered += 1;
        state.totals.dead_lettered += 1;
        *state.by_reason.entry(reason_key(rec.reason)).or_default() += 1;
        if state.ring.len() == self.config.ring_capacity {
            state.ring.pop_front();
        }
        state.ring.push_back(rec);
    }

    /// Closes every bucket that ended at or before `now`.
    pub fn roll(&self, now: DateTime<Utc>) {
        let mut state = self.state.lock().unwrap();
        self.roll_locked(&mut state, now);
    }

    fn roll_locked(&self, state: &mut State, now: DateTime<Utc>) {
        let window = crate::clock::delta(self.config.window);
        while state.open.window_start + window <= now {
            let next = MetricsBucket::empty(state.open.window_start + window, self.config.window);
            let closed = std::mem::replace(&mut state.open, next);
            if let Some(count) = check_alert(closed.dead_lettered, self.config.alert_threshold) {
                let alert = Alert {
                    reason: "dead letters above threshold".into(),
                    bucket: closed.window_start,
                    count,
                };
                self.fire(&alert);
                state.alerts.push(alert);
            }
            state.closed.push_back(closed);
            if state.closed.len() > self.config.retain_buckets {
                state.closed.pop_front();
            }
        }
    }

    fn fire(&self, alert: &Alert) {
        tracing::error!(
            target: "feedmix::alerts",
            bucket = %alert.bucket.to_rfc3339(),
            count = alert.count,
            threshold = self.config.alert_threshold,
            "{}",
            alert.reason
        );
        let (Some(url), Some(client)) = (self.config.alert_webhook_url.clone(), self.http.clone()) else {
            return;
        };
        let Ok(handle) = tokio::runtime::Handle::try_current() else {
            tracing::warn!("no async runtime; alert webhook skipped");
            return;
        };
        let body = alert.clone();
        handle.spawn(async move {
            match client.post(url.clone()).json(&body).send().await {
                Ok(resp) if resp.status().is_success() => {}
                Ok(resp) => tracing::warn!(%url, status = %resp.status(), "alert webhook rejected"),
                Err(err) => tracing::warn!(%url, error = %err, "alert webhook failed"),
            }
        });
    }

    /// The `window_count` most recent closed buckets followed by the open one.
    pub fn snapshot(&self, window_count: usize) -> Vec<MetricsBucket> {
        let mut state = self.state.lock().unwrap();
        self.roll_locked(&mut state, self.clock.now());
        let skip = state.closed.len().saturating_sub(window_count);
        let mut out: Vec<_> = state.closed.iter().skip(skip).cloned().collect();
        out.push(state.open.clone());
        out
    }

    pub fn totals(&self) -> Totals {
        self.state.lock().unwrap().totals.clone()
    }

    pub fn alerts(&self) -> Vec<Alert> {
        self.state.lock().unwrap().alerts.clone()
    }

    pub fn dead_letters(&self) -> Vec<DeadLetterRecord> {
        self.state.lock().unwrap().ring.iter().cloned().collect()
    }

    pub fn dead_letter_count(&self, reason: DeadLetterReason) -> u64 {
        let state = self.state.lock().unwrap();
        state.by_reason.get(reason_key(reason)).copied().unwrap_or(0)
    }
}

fn reason_key(reason: DeadLetterReason) -> &'static str {
    match reason {
        DeadLetterReason::MailboxOverflow => "mailbox_overflow",
        DeadLetterReason::QueueFull => "queue_full",
        DeadLetterReason::Unroutable => "unroutable",
    }
}

pub const CSV_HEADER: &str = "window_start,sent,received,deleted,dead_lettered,items_ingested";

pub fn to_csv(buckets: &[MetricsBucket]) -> String {
    let mut out = String::with_capacity(64 * (buckets.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for b in buckets {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            b.window_start.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            b.sent,
            b.received,
            b.deleted,
            b.dead_lettered,
            b.items_ingested
        );
    }
    out
}
