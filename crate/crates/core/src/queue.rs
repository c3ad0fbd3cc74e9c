//! In-process dual queue with visibility timeouts.
//!
//! Two FIFOs (priority and main) feed a single in-flight table. A received
//! message stays invisible until it is deleted or its visibility timeout
//! lapses; lapsed messages go back to the front of their class queue the
//! next time anyone receives, which gives at-least-once delivery.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{delta, Clock};
use crate::model::{MessageClass, QueueMessage};
use crate::monitor::{Metric, Monitor};

#[derive(Debug, Clone)]
pub struct QueueConfig {
    pub visibility_timeout: Duration,
    pub capacity: usize,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            visibility_timeout: Duration::from_secs(30),
            capacity: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueueError {
    #[error("queue is at capacity ({capacity} messages)")]
    QueueFull { capacity: usize },
    #[error("message `{0}` is not in flight")]
    NotInFlight(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub main: u64,
    pub priority: u64,
}

impl ClassCounts {
    fn bump(&mut self, class: MessageClass) {
        match class {
            MessageClass::Main => self.main += 1,
            MessageClass::Priority => self.priority += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.main + self.priority
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueDepths {
    pub visible_main: usize,
    pub visible_priority: usize,
    pub in_flight: usize,
}

impl QueueDepths {
    pub fn visible(&self) -> usize {
        self.visible_main + self.visible_priority
    }

    pub fn total(&self) -> usize {
        self.visible() + self.in_flight
    }
}

/// Counters and depths taken under one lock.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueStats {
    pub sent: ClassCounts,
    pub received: ClassCounts,
    pub deleted: ClassCounts,
    pub depths: QueueDepths,
}

#[derive(Debug, Clone)]
struct Entry {
    seq: u64,
    msg: QueueMessage,
}

#[derive(Debug)]
struct InFlight {
    entry: Entry,
    invisible_until: DateTime<Utc>,
}

#[derive(Debug, Default)]
struct State {
    main: VecDeque<Entry>,
    priority: VecDeque<Entry>,
    in_flight: HashMap<String, InFlight>,
    next_seq: u64,
    sent: ClassCounts,
    received: ClassCounts,
    deleted: ClassCounts,
}

impl State {
    fn total_depth(&self) -> usize {
        self.main.len() + self.priority.len() + self.in_flight.len()
    }

    fn fifo(&mut self, class: MessageClass) -> &mut VecDeque<Entry> {
        match class {
            MessageClass::Main => &mut self.main,
            MessageClass::Priority => &mut self.priority,
        }
    }

    fn depths(&self) -> QueueDepths {
        QueueDepths {
            visible_main: self.main.len(),
            visible_priority: self.priority.len(),
            in_flight: self.in_flight.len(),
        }
    }

    /// Moves lapsed in-flight messages back to the front of their FIFO,
    /// oldest first.
    fn reclaim_expired(&mut self, now: DateTime<Utc>) {
        let expired: Vec<String> = self
            .in_flight
            .iter()
            .filter(|(_, f)| f.invisible_until <= now)
            .map(|(id, _)| id.clone())
            .collect();
        if expired.is_empty() {
            return;
        }
        let mut entries: Vec<Entry> = expired
            .into_iter()
            .filter_map(|id| self.in_flight.remove(&id))
            .map(|f| f.entry)
            .collect();
        entries.sort_by_key(|e| std::cmp::Reverse(e.seq));
        for entry in entries {
            let class = entry.msg.priority;
            self.fifo(class).push_front(entry);
        }
    }
}

pub struct DualQueue {
    config: QueueConfig,
    clock: Arc<dyn Clock>,
    monitor: Option<Arc<Monitor>>,
    state: Mutex<State>,
}

impl std::fmt::Debug for DualQueue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DualQueue")
            .field("config", &self.config)
            .field("depths", &self.depths())
            .finish()
    }
}

impl DualQueue {
    pub fn new(config: QueueConfig, clock: Arc<dyn Clock>) -> Self {
        Self {
            config,
            clock,
            monitor: None,
            state: Mutex::new(State::default()),
        }
    }

    pub fn with_monitor(mut self, monitor: Arc<Monitor>) -> Self {
        self.monitor = Some(monitor);
        self
    }

    pub fn config(&self) -> &QueueConfig {
        &self.config
    }

    fn metric(&self, metric: Metric, at: DateTime<Utc>, n: u64) {
        if let (Some(m), true) = (&self.monitor, n > 0) {
            m.record(metric, at, n);
        }
    }

    pub fn send(&self, msg: QueueMessage) -> Result<String, QueueError> {
        let mut ids = self.send_batch(vec![msg])?;
        Ok(ids.remove(0))
    }

    /// Enqueues all of `msgs` or none of them.
    pub fn send_batch(&self, msgs: Vec<QueueMessage>) -> Result<Vec<String>, QueueError> {
        let at = self.clock.now();
        let mut state = self.state.lock().unwrap();
        if state.total_depth() + msgs.len() > self.config.capacity {
            return Err(QueueError::QueueFull {
                capacity: self.config.capacity,
            });
        }
        let n = msgs.len() as u64;
        let mut ids = Vec::with_capacity(msgs.len());
        for msg in msgs {
            let seq = state.next_seq;
            state.next_seq += 1;
            state.sent.bump(msg.priority);
            ids.push(msg.message_id.clone());
            let class = msg.priority;
            state.fifo(class).push_back(Entry { seq, msg });
        }
        drop(state);
        self.metric(Metric::Sent, at, n);
        Ok(ids)
    }

    /// Up to `max` visible messages, priority class first.
    pub fn receive(&self, max: usize, now: DateTime<Utc>) -> Vec<QueueMessage> {
        let mut state = self.state.lock().unwrap();
        state.reclaim_expired(now);
        let invisible_until = now + delta(self.config.visibility_timeout);
        let mut out = Vec::with_capacity(max.min(state.main.len() + state.priority.len()));
        while out.len() < max {
            let Some(mut entry) = state.priority.pop_front().or_else(|| state.main.pop_front()) else {
                break;
            };
            entry.msg.receive_count += 1;
            state.received.bump(entry.msg.priority);
            out.push(entry.msg.clone());
            state.in_flight.insert(
                entry.msg.message_id.clone(),
                InFlight {
                    entry,
                    invisible_until,
                },
            );
        }
        drop(state);
        self.metric(Metric::Received, now, out.len() as u64);
        out
    }

    pub fn delete(&self, message_id: &str) -> Result<(), QueueError> {
        let mut state = self.state.lock().unwrap();
        let Some(flight) = state.in_flight.remove(message_id) else {
            return Err(QueueError::NotInFlight(message_id.to_owned()));
        };
        state.deleted.bump(flight.entry.msg.priority);
        drop(state);
        self.metric(Metric::Deleted, self.clock.now(), 1);
        Ok(())
    }

    pub fn depths(&self) -> QueueDepths {
        self.state.lock().unwrap().depths()
    }

    pub fn stats(&self) -> QueueStats {
        let state = self.state.lock().unwrap();
        QueueStats {
            sent: state.sent,
            received: state.received,
            deleted: state.deleted,
            depths: state.depths(),
        }
    }
}
