//! Balancing worker pool: N tasks draining one shared mailbox.

use std::future::Future;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures_util::future::BoxFuture;
use tokio::sync::Notify;
use tokio::task::JoinHandle;

use super::mailbox::BoundedMailbox;
use crate::model::QueueMessage;

pub type Handler = Arc<dyn Fn(QueueMessage) -> BoxFuture<'static, ()> + Send + Sync>;

/// Wraps an async closure as a pool handler.
pub fn handler<F, Fut>(f: F) -> Handler
where
    F: Fn(QueueMessage) -> Fut + Send + Sync + 'static,
    Fut: Future<Output = ()> + Send + 'static,
{
    Arc::new(move |msg| Box::pin(f(msg)))
}

struct StopSignal {
    flag: AtomicBool,
    notify: Notify,
}

impl StopSignal {
    fn new() -> Arc<Self> {
        Arc::new(Self {
            flag: AtomicBool::new(false),
            notify: Notify::new(),
        })
    }

    fn raise(&self) {
        self.flag.store(true, Ordering::Release);
        self.notify.notify_one();
    }

    fn raised(&self) -> bool {
        self.flag.load(Ordering::Acquire)
    }
}

struct Worker {
    stop: Arc<StopSignal>,
    handle: JoinHandle<()>,
}

#[derive(Default)]
struct Workers {
    active: Vec<Worker>,
    retiring: Vec<JoinHandle<()>>,
}

pub struct WorkerPool {
    name: String,
    mailbox: Arc<BoundedMailbox>,
    handler: Handler,
    workers: Mutex<Workers>,
    completed_window: Arc<AtomicU64>,
    completed_total: Arc<AtomicU64>,
    busy: Arc<AtomicU64>,
}

impl std::fmt::Debug for WorkerPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerPool")
            .field("name", &self.name)
            .field("size", &self.size())
            .field("completed", &self.completed_total())
            .finish()
    }
}

impl WorkerPool {
    /// Must be called inside a tokio runtime; workers start immediately.
    pub fn new(
        name: impl Into<String>,
        mailbox: Arc<BoundedMailbox>,
        handler: Handler,
        size: usize,
    ) -> Self {
        let pool = Self {
            name: name.into(),
            mailbox,
            handler,
            workers: Mutex::new(Workers::default()),
            completed_window: Arc::new(AtomicU64::new(0)),
            completed_total: Arc::new(AtomicU64::new(0)),
            busy: Arc::new(AtomicU64::new(0)),
        };
        pool.set_size(size);
        pool
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn mailbox(&self) -> &Arc<BoundedMailbox> {
        &self.mailbox
    }

    pub fn size(&self) -> usize {
        self.workers.lock().unwrap().active.len()
    }

    /// Workers currently inside the handler.
    pub fn busy(&self) -> u64 {
        self.busy.load(Ordering::Relaxed)
    }

    pub fn completed_total(&self) -> u64 {
        self.completed_total.load(Ordering::Relaxed)
    }

    /// Completions since the previous call.
    pub fn take_completed(&self) -> u64 {
        self.completed_window.swap(0, Ordering::Relaxed)
    }

    /// Grows or shrinks the pool. Removed workers finish the message they
    /// hold before exiting.
    pub fn set_size(&self, size: usize) {
        let mut workers = self.workers.lock().unwrap();
        workers.retiring.retain(|h| !h.is_finished());
        while workers.active.len() < size {
            let w = self.spawn_worker();
            workers.active.push(w);
        }
        while workers.active.len() > size {
            let w = workers.active.pop().unwrap();
            w.stop.raise();
            workers.retiring.push(w.handle);
        }
    }

    fn spawn_worker(&self) -> Worker {
        let stop = StopSignal::new();
        let mailbox = self.mailbox.clone();
        let handler = self.handler.clone();
        let window = self.completed_window.clone();
        let total = self.completed_total.clone();
        let busy = self.busy.clone();
        let signal = stop.clone();
        let handle = tokio::spawn(async move {
            while !signal.raised() {
                let msg = tokio::select! {
                    biased;
                    _ = signal.notify.notified() => break,
                    msg = mailbox.pop() => msg,
                };
                busy.fetch_add(1, Ordering::Relaxed);
                handler(msg).await;
                busy.fetch_sub(1, Ordering::Relaxed);
                window.fetch_add(1, Ordering::Relaxed);
                total.fetch_add(1, Ordering::Relaxed);
            }
        });
        Worker { stop, handle }
    }

    /// Stops every worker and waits up to `drain` for in-hand messages to
    /// finish. Returns false if some worker had to be aborted.
    pub async fn shutdown(&self, drain: Duration) -> bool {
        let handles: Vec<JoinHandle<()>> = {
            let mut workers = self.workers.lock().unwrap();
            let mut hs: Vec<_> = workers.retiring.drain(..).collect();
            for w in workers.active.drain(..) {
                w.stop.raise();
                hs.push(w.handle);
            }
            hs
        };
        let aborts: Vec<_> = handles.iter().map(|h| h.abort_handle()).collect();
        let joined = tokio::time::timeout(drain, futures_util::future::join_all(handles)).await;
        if joined.is_err() {
            for a in aborts {
                a.abort();
            }
            tracing::warn!(pool = %self.name, "drain deadline passed, aborting workers");
            return false;
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChannelKind, MessageClass};
    use chrono::Utc;

    fn msg(i: usize) -> QueueMessage {
        QueueMessage::new(format!("s{i}"), ChannelKind::News, MessageClass::Main, Utc::now())
    }

    #[tokio::test]
    async fn drains_mailbox() {
        let mb = Arc::new(BoundedMailbox::new(1000));
        for i in 0..500 {
            mb.try_push(msg(i)).unwrap();
        }
        let pool = WorkerPool::new("news", mb.clone(), handler(|_m| async {}), 8);
        for _ in 0..200 {
            if pool.completed_total() == 500 {
                break;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        assert_eq!(pool.completed_total(), 500);
        assert_eq!(pool.take_completed(), 500);
        assert_eq!(pool.take_completed(), 0);
        assert!(pool.shutdown(Duration::from_secs(1)).await);
    }

    #[tokio::test]
    async fn concurrency_follows_size() {
        let mb = Arc::new(BoundedMailbox::new(1000));
        for i in 0..200 {
            mb.try_push(msg(i)).unwrap();
        }
        let peak = Arc::new(AtomicU64::new(0));
        let live = Arc::new(AtomicU64::new(0));
        let h = {
            let (peak, live) = (peak.clone(), live.clone());
            handler(move |_m| {
                let (peak, live) = (peak.clone(), live.clone());
                async move {
                    let n = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(n, Ordering::SeqCst);
                    tokio::time::sleep(Duration::from_millis(5)).await;
                    live.fetch_sub(1, Ordering::SeqCst);
                }
            })
        };
        let pool = WorkerPool::new("news", mb.clone(), h, 6);
        tokio::time::sleep(Duration::from_millis(40)).await;
        assert_eq!(peak.load(Ordering::SeqCst), 6);
        pool.set_size(2);
        assert_eq!(pool.size(), 2);
        // retiring workers finish what they hold, then only two remain
        tokio::time::sleep(Duration::from_millis(30)).await;
        peak.store(0, Ordering::SeqCst);
        tokio::time::sleep(Duration::from_millis(40)).await;
        assert!(peak.load(Ordering::SeqCst) <= 2);
        assert!(pool.shutdown(Duration::from_secs(1)).await);
    }

    #[tokio::test]
    async fn downsize_is_graceful() {
        let mb = Arc::new(BoundedMailbox::new(10));
        let finished = Arc::new(AtomicU64::new(0));
        let h = {
            let finished = finished.clone();
            handler(move |_m| {
                let finished = finished.clone();
                async move {
                    tokio::time::sleep(Duration::from_millis(50)).await;
                    finished.fetch_add(1, Ordering::SeqCst);
                }
            })
        };
        let pool = WorkerPool::new("news", mb.clone(), h, 3);
        for i in 0..3 {
            mb.try_push(msg(i)).unwrap();
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
        pool.set_size(0);
        assert!(pool.shutdown(Duration::from_secs(1)).await);
        assert_eq!(finished.load(Ordering::SeqCst), 3);
    }

    #[tokio::test]
    async fn shutdown_aborts_after_deadline() {
        let mb = Arc::new(BoundedMailbox::new(10));
        let pool = WorkerPool::new(
            "slow",
            mb.clone(),
            handler(|_m| tokio::time::sleep(Duration::from_secs(60))),
            1,
        );
        mb.try_push(msg(0)).unwrap();
        tokio::time::sleep(Duration::from_millis(10)).await;
        assert!(!pool.shutdown(Duration::from_millis(50)).await);
    }
}
