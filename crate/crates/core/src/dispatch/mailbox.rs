//! Bounded, priority-stable mailbox shared by all workers of one pool.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use tokio::sync::Notify;

use crate::model::{MessageClass, QueueMessage};

#[derive(Debug, Default)]
struct Lanes {
    priority: VecDeque<QueueMessage>,
    main: VecDeque<QueueMessage>,
}

impl Lanes {
    fn len(&self) -> usize {
        self.priority.len() + self.main.len()
    }
}

#[derive(Debug)]
pub struct BoundedMailbox {
    capacity: usize,
    lanes: Mutex<Lanes>,
    ready: Notify,
    high_water: AtomicUsize,
}

pub const DEFAULT_MAILBOX_CAPACITY: usize = 256;

impl BoundedMailbox {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            lanes: Mutex::new(Lanes::default()),
            ready: Notify::new(),
            high_water: AtomicUsize::new(0),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Never blocks. Hands the message back when the mailbox is full.
    pub fn try_push(&self, msg: QueueMessage) -> Result<(), QueueMessage> {
        let mut lanes = self.lanes.lock().unwrap();
        if lanes.len() >= self.capacity {
            return Err(msg);
        }
        match msg.priority {
            MessageClass::Priority => lanes.priority.push_back(msg),
            MessageClass::Main => lanes.main.push_back(msg),
        }
        self.high_water.fetch_max(lanes.len(), Ordering::Relaxed);
        drop(lanes);
        self.ready.notify_one();
        Ok(())
    }

    pub fn try_pop(&self) -> Option<QueueMessage> {
        let mut lanes = self.lanes.lock().unwrap();
        let msg = lanes.priority.pop_front().or_else(|| lanes.main.pop_front());
        let more = lanes.len() > 0;
        drop(lanes);
        if msg.is_some() && more {
            // pass the wakeup along so another idle worker picks up the rest
            self.ready.notify_one();
        }
        msg
    }

    /// Waits for the next message. Cancel-safe: a message is only taken
    /// when this future completes.
    pub async fn pop(&self) -> QueueMessage {
        loop {
            let notified = self.ready.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if let Some(msg) = self.try_pop() {
                return msg;
            }
            notified.await;
        }
    }

    pub fn len(&self) -> usize {
        self.lanes.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest length ever observed.
    pub fn high_water(&self) -> usize {
        self.high_water.load(Ordering::Relaxed)
    }
}
