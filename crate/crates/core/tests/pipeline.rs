use std::sync::Arc;
use std::time::Duration;

use chrono::Utc;
use feedmix::clock::{Clock, ScaledClock};
use feedmix::feedsim::*;
use feedmix::model::{validate_stream, ChannelKind, StreamDraft, StreamStatus};
use feedmix::pipeline::{Pipeline, PipelineConfig, PipelineHooks};
use feedmix::store::Store;

async fn wait_until(mut cond: impl FnMut() -> bool, limit: Duration) -> bool {
    let start = std::time::Instant::now();
    while start.elapsed() < limit {
        if cond() {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    cond()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn feeds_flow_end_to_end() {
    let sc = SimScenario {
        feed_count: 20,
        items_per_poll: ItemsPerPoll::Constant(4),
        duplicate_fraction: 0.25,
        feed_format: SimFormat::Mixed,
        ..Default::default()
    };
    let sim = SimServer::start(sc.clone()).await.unwrap();
    let clock: Arc<dyn Clock> = Arc::new(ScaledClock::new(Utc::now(), 60.0));
    let store = Store::in_memory(clock.clone());
    for i in 0..sc.feed_count {
        let channels = if i % 5 == 0 {
            vec![ChannelKind::News, ChannelKind::Twitter]
        } else {
            vec![ChannelKind::ALL[i % 4]]
        };
        let s = validate_stream(
            StreamDraft {
                id: Some(format!("feed-{i}")),
                url: sim.feed_url(i).to_string(),
                channels,
                poll_interval: Some(60),
                ..Default::default()
            },
            clock.now(),
        )
        .unwrap();
        store.create_stream(s).unwrap();
    }
    let p = Pipeline::start(PipelineConfig::default(), store.clone(), clock.clone(), PipelineHooks::default());
    let polled = wait_until(|| (0..sc.feed_count).all(|i| sim.polls_served(i) >= 2), Duration::from_secs(30)).await;
    assert!(polled);

    let stats = p.queue().stats();
    // sent = deleted + in flight + visible at any instant
    assert_eq!(
        stats.sent.total(),
        stats.deleted.total() + stats.depths.in_flight as u64 + stats.depths.visible() as u64
    );
    let monitor = p.monitor().clone();
    let queue = p.queue().clone();
    assert!(p.stop(Duration::from_secs(5)).await);
    let log = sim.stop().await;

    let mut expected = 0;
    for i in 0..sc.feed_count {
        let served = log
            .iter()
            .filter(|r| r.feed == Some(i) && matches!(r.status, 200 | 304))
            .count() as u64;
        let mut g = FeedGen::new(i);
        for _ in 0..served {
            g.advance(&sc);
        }
        expected += g.distinct();
    }
    assert_eq!(store.item_count() as u64, expected);
    assert_eq!(monitor.totals().items_ingested, expected);
    assert_eq!(monitor.totals().sent, queue.stats().sent.total());
    assert_eq!(monitor.totals().dead_lettered, 0);
    assert!(store.list_streams().iter().all(|s| s.status != StreamStatus::Failed));
}
