//! Router plus per-channel balancing pools.
//!
//! The [`router::Router`] pulls batches from the queue under a
//! [`policy::ReplenishPolicy`] and places each message in its channel's
//! shared [`mailbox::BoundedMailbox`]. Each channel has a
//! [`pool::WorkerPool`] whose size is revisited every epoch by the
//! [`resizer`].

pub mod mailbox;
pub mod policy;
pub mod pool;
pub mod resizer;
pub mod router;
pub mod sim;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::clock::{self, Clock};
use crate::model::ChannelKind;
use crate::monitor::Monitor;
use crate::queue::DualQueue;

pub use mailbox::{BoundedMailbox, DEFAULT_MAILBOX_CAPACITY};
pub use policy::{replenish, should_replenish, ReplenishPolicy, RouterState};
pub use pool::{handler, Handler, WorkerPool};
pub use resizer::{resize_epoch, PoolStats, ResizerConfig};
pub use router::{Completer, RouteError, RouteOutcome, Router};

#[derive(Debug, Clone)]
pub struct DispatchConfig {
    pub policy: ReplenishPolicy,
    pub mailbox_capacity: usize,
    pub resizer: ResizerConfig,
    pub resize_epoch: Duration,
    pub resize_enabled: bool,
    pub initial_pool_size: usize,
    pub channels: Vec<ChannelKind>,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        Self {
            policy: ReplenishPolicy::default(),
            mailbox_capacity: DEFAULT_MAILBOX_CAPACITY,
            resizer: ResizerConfig::default(),
            resize_epoch: Duration::from_secs(10),
            resize_enabled: true,
            initial_pool_size: 4,
            channels: ChannelKind::ALL.to_vec(),
        }
    }
}

impl DispatchConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.policy.validate()?;
        self.resizer.validate()?;
        if self.mailbox_capacity == 0 {
            return Err("mailbox_capacity must be at least 1".into());
        }
        if self.resize_epoch.is_zero() {
            return Err("resize_epoch must be positive".into());
        }
        Ok(())
    }
}

/// A running router and its channel pools.
pub struct Dispatcher {
    config: DispatchConfig,
    clock: Arc<dyn Clock>,
    router: Arc<Router>,
    pools: BTreeMap<ChannelKind, Arc<WorkerPool>>,
    stats: Mutex<BTreeMap<ChannelKind, PoolStats>>,
}

impl std::fmt::Debug for Dispatcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dispatcher")
            .field("router", &self.router)
            .field("pool_sizes", &self.pool_sizes())
            .finish()
    }
}

impl Dispatcher {
    /// Builds the router and starts one pool per configured channel.
    /// `handler_for` receives the router so handlers can complete messages.
    pub fn start(
        config: DispatchConfig,
        queue: Arc<DualQueue>,
        monitor: Arc<Monitor>,
        clock: Arc<dyn Clock>,
        handler_for: impl Fn(ChannelKind, Arc<Router>) -> Handler,
    ) -> Self {
        let mut router = Router::new(config.policy.clone(), queue, monitor, clock.clone());
        let mut mailboxes = Vec::new();
        for &channel in &config.channels {
            let mb = Arc::new(BoundedMailbox::new(config.mailbox_capacity));
            router = router.with_pool(channel, mb.clone());
            mailboxes.push((channel, mb));
        }
        let router = Arc::new(router);
        let mut pools = BTreeMap::new();
        let mut stats = BTreeMap::new();
        for (i, (channel, mb)) in mailboxes.into_iter().enumerate() {
            let resizer = ResizerConfig {
                rng_seed: config.resizer.rng_seed.wrapping_add(i as u64),
                ..config.resizer.clone()
            };
            let ps = PoolStats::new(resizer, config.initial_pool_size);
            let h = handler_for(channel, router.clone());
            let pool = WorkerPool::new(channel.as_str(), mb, h, ps.current_size);
            pools.insert(channel, Arc::new(pool));
            stats.insert(channel, ps);
        }
        Self {
            config,
            clock,
            router,
            pools,
            stats: Mutex::new(stats),
        }
    }

    pub fn config(&self) -> &DispatchConfig {
        &self.config
    }

    pub fn router(&self) -> &Arc<Router> {
        &self.router
    }

    pub fn pool(&self, channel: ChannelKind) -> Option<&Arc<WorkerPool>> {
        self.pools.get(&channel)
    }

    pub fn pools(&self) -> impl Iterator<Item = (&ChannelKind, &Arc<WorkerPool>)> {
        self.pools.iter()
    }

    pub fn pool_sizes(&self) -> BTreeMap<ChannelKind, usize> {
        self.pools.iter().map(|(c, p)| (*c, p.size())).collect()
    }

    /// Closes one adjustment window for every pool.
    pub fn resize_all(&self, window: Duration) {
        let mut stats = self.stats.lock().unwrap();
        for (channel, pool) in &self.pools {
            let ps = stats.get_mut(channel).expect("stats per pool");
            let done = pool.take_completed();
            let next = resize_epoch(ps, done, window);
            if next != pool.size() {
                tracing::debug!(%channel, from = pool.size(), to = next, done, "resize");
            }
            pool.set_size(next);
        }
    }

    /// Spawns the router loop and, if enabled, the resize loop.
    pub fn spawn(self: &Arc<Self>, shutdown: watch::Receiver<bool>) -> Vec<JoinHandle<()>> {
        let mut tasks = vec![tokio::spawn(self.router.clone().run(shutdown.clone()))];
        if self.config.resize_enabled {
            let me = self.clone();
            let mut shutdown = shutdown;
            tasks.push(tokio::spawn(async move {
                let mut last = me.clock.now();
                loop {
                    tokio::select! {
                        _ = clock::sleep(me.clock.as_ref(), me.config.resize_epoch) => {}
                        _ = shutdown.changed() => {}
                    }
                    if *shutdown.borrow() {
                        break;
                    }
                    let now = me.clock.now();
                    let window = (now - last).to_std().unwrap_or(me.config.resize_epoch);
                    last = now;
                    if !window.is_zero() {
                        me.resize_all(window);
                    }
                }
            }));
        }
        tasks
    }

    /// Stops all pools, letting in-hand messages finish within `drain`.
    pub async fn shutdown(&self, drain: Duration) -> bool {
        let mut clean = true;
        for pool in self.pools.values() {
            clean &= pool.shutdown(drain).await;
        }
        clean
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SystemClock;
    use crate::model::{MessageClass, QueueMessage};
    use crate::monitor::MonitorConfig;
    use crate::queue::QueueConfig;
    use chrono::Utc;

    #[tokio::test]
    async fn end_to_end_drain() {
        let clock: Arc<dyn Clock> = Arc::new(SystemClock);
        let monitor = Arc::new(Monitor::new(MonitorConfig::default(), clock.clone()));
        let queue = Arc::new(
            DualQueue::new(QueueConfig::default(), clock.clone()).with_monitor(monitor.clone()),
        );
        for i in 0..400 {
            let ch = ChannelKind::ALL[i % 4];
            queue
                .send(QueueMessage::new(format!("s{i}"), ch, MessageClass::Main, Utc::now()))
                .unwrap();
        }
        let d = Arc::new(Dispatcher::start(
            DispatchConfig::default(),
            queue.clone(),
            monitor.clone(),
            clock,
            |_ch, router| {
                handler(move |m| {
                    let router = router.clone();
                    async move { router.complete(&m.message_id) }
                })
            },
        ));
        let (tx, rx) = watch::channel(false);
        let tasks = d.spawn(rx);
        for _ in 0..400 {
            if queue.stats().deleted.total() == 400 {
                break;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        assert_eq!(queue.stats().deleted.total(), 400);
        assert_eq!(d.router().outstanding(), 0);
        tx.send(true).unwrap();
        for t in tasks {
            t.await.unwrap();
        }
        assert!(d.shutdown(Duration::from_secs(1)).await);
    }
}
