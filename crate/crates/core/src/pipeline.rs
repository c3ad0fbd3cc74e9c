//! Everything wired together: scheduler → queue → router → pools → workers.

use std::sync::Arc;
use std::time::Duration;

use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::clock::{self, Clock};
use crate::dispatch::{handler, DispatchConfig, Dispatcher, Handler};
use crate::monitor::{Monitor, MonitorConfig};
use crate::queue::{DualQueue, QueueConfig};
use crate::scheduler::{Scheduler, SchedulerConfig};
use crate::store::Store;
use crate::worker::{FaultInjector, FetchConfig, Fetcher, Worker, WorkerStats};

#[derive(Debug, Clone, Default)]
pub struct PipelineConfig {
    pub scheduler: SchedulerConfig,
    pub queue: QueueConfig,
    pub dispatch: DispatchConfig,
    pub fetch: FetchConfig,
    pub monitor: MonitorConfig,
}

/// Test and demo seams.
#[derive(Clone, Default)]
pub struct PipelineHooks {
    pub faults: Option<Arc<dyn FaultInjector>>,
    /// Extra clock time every worker spends per message.
    pub slowdown: Option<Duration>,
}

pub struct Pipeline {
    clock: Arc<dyn Clock>,
    store: Store,
    queue: Arc<DualQueue>,
    monitor: Arc<Monitor>,
    scheduler: Arc<Scheduler>,
    dispatcher: Arc<Dispatcher>,
    worker_stats: Arc<WorkerStats>,
    config: PipelineConfig,
    shutdown: watch::Sender<bool>,
    stop_scheduling: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("queue", &self.queue)
            .field("dispatcher", &self.dispatcher)
            .finish()
    }
}

impl Pipeline {
    /// Starts all loops on the current tokio runtime.
    pub fn start(config: PipelineConfig, store: Store, clock: Arc<dyn Clock>, hooks: PipelineHooks) -> Self {
        let monitor = Arc::new(Monitor::new(config.monitor.clone(), clock.clone()));
        let queue = Arc::new(DualQueue::new(config.queue.clone(), clock.clone()).with_monitor(monitor.clone()));
        let scheduler = Arc::new(Scheduler::new(
            config.scheduler.clone(),
            store.clone(),
            queue.clone(),
            monitor.clone(),
        ));
        let fetcher = Fetcher::new(config.fetch.clone());
        let worker_stats = Arc::new(WorkerStats::default());
        let dispatcher = {
            let (store, monitor, clock2, stats) = (store.clone(), monitor.clone(), clock.clone(), worker_stats.clone());
            Arc::new(Dispatcher::start(
                config.dispatch.clone(),
                queue.clone(),
                monitor.clone(),
                clock.clone(),
                move |_channel, router| {
                    let mut w = Worker::new(store.clone(), fetcher.clone(), monitor.clone(), clock2.clone(), router)
                        .with_stats(stats.clone());
                    if let Some(f) = hooks.faults.clone() {
                        w = w.with_faults(f);
                    }
                    slowed(w.into_handler(), hooks.slowdown, clock2.clone())
                },
            ))
        };

        let (shutdown, rx) = watch::channel(false);
        let (stop_scheduling, sched_rx) = watch::channel(false);
        let mut tasks = dispatcher.spawn(rx);
        tasks.push(tokio::spawn(scheduler.clone().run(clock.clone(), sched_rx)));
        Self {
            clock,
            store,
            queue,
            monitor,
            scheduler,
            dispatcher,
            worker_stats,
            config,
            shutdown,
            stop_scheduling,
            tasks,
        }
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn queue(&self) -> &Arc<DualQueue> {
        &self.queue
    }

    pub fn monitor(&self) -> &Arc<Monitor> {
        &self.monitor
    }

    pub fn scheduler(&self) -> &Arc<Scheduler> {
        &self.scheduler
    }

    pub fn dispatcher(&self) -> &Arc<Dispatcher> {
        &self.dispatcher
    }

    pub fn worker_stats(&self) -> &Arc<WorkerStats> {
        &self.worker_stats
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Stops scheduler ticks only; queued work keeps draining.
    pub fn stop_scheduling(&self) {
        let _ = self.stop_scheduling.send(true);
    }

    /// Stops picking, pulling and resizing; pools get `drain` to finish the
    /// messages they hold. Returns false if a worker had to be aborted.
    pub async fn stop(self, drain: Duration) -> bool {
        let _ = self.stop_scheduling.send(true);
        let _ = self.shutdown.send(true);
        for t in self.tasks {
            let _ = t.await;
        }
        let clean = self.dispatcher.shutdown(drain).await;
        self.monitor.roll(self.clock.now());
        clean
    }
}

fn slowed(inner: Handler, extra: Option<Duration>, clock: Arc<dyn Clock>) -> Handler {
    match extra {
        None => inner,
        Some(extra) => handler(move |msg| {
            let inner = inner.clone();
            let clock = clock.clone();
            async move {
                clock::sleep(clock.as_ref(), extra).await;
                inner(msg).await
            }
        }),
    }
}
