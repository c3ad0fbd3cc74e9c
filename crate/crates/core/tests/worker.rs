use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use feedmix::clock::{Clock, ManualClock};
use feedmix::dispatch::Completer;
use feedmix::feedsim::*;
use feedmix::model::{validate_stream, ChannelKind, MessageClass, QueueMessage, StreamDraft, StreamStatus};
use feedmix::monitor::{Monitor, MonitorConfig};
use feedmix::store::Store;
use feedmix::worker::*;

#[derive(Default)]
struct Acks {
    ids: Mutex<Vec<String>>,
}

impl Completer for Acks {
    fn complete(&self, message_id: &str) {
        self.ids.lock().unwrap().push(message_id.to_owned());
    }
}

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2018, 6, 17, 15, 0, 0).unwrap()
}

struct Rig {
    clock: Arc<ManualClock>,
    store: Store,
    monitor: Arc<Monitor>,
    acks: Arc<Acks>,
    worker: Worker,
}

fn rig() -> Rig {
    let clock = Arc::new(ManualClock::new(t0()));
    let store = Store::in_memory(clock.clone());
    let monitor = Arc::new(Monitor::new(MonitorConfig::default(), clock.clone()));
    let acks = Arc::new(Acks::default());
    let worker = Worker::new(
        store.clone(),
        Fetcher::new(FetchConfig {
            timeout: Duration::from_secs(5),
            ..Default::default()
        }),
        monitor.clone(),
        clock.clone(),
        acks.clone(),
    );
    Rig {
        clock,
        store,
        monitor,
        acks,
        worker,
    }
}

fn add_stream(r: &Rig, id: &str, url: &url::Url) {
    let s = validate_stream(
        StreamDraft {
            id: Some(id.into()),
            url: url.to_string(),
            channels: vec![ChannelKind::News],
            poll_interval: Some(60),
            ..Default::default()
        },
        r.clock.now(),
    )
    .unwrap();
    r.store.create_stream(s).unwrap();
}

fn picked_message(r: &Rig, id: &str) -> QueueMessage {
    r.store.force_pick(id, r.clock.now()).unwrap();
    QueueMessage::new(id, ChannelKind::News, MessageClass::Main, r.clock.now())
}

#[tokio::test]
async fn new_items_then_dedup_arithmetic() {
    // 8 per poll; on the second poll floor(0.375 * 8) = 3 repeat
    let sim = SimServer::start(SimScenario {
        feed_count: 1,
        items_per_poll: ItemsPerPoll::Constant(8),
        duplicate_fraction: 0.375,
        validator_mode: ValidatorMode::HonorEtag,
        ..Default::default()
    })
    .await
    .unwrap();
    let r = rig();
    add_stream(&r, "s", &sim.feed_url(0));

    let m1 = picked_message(&r, "s");
    let out = r.worker.process_message(m1.clone()).await;
    assert_eq!(out.items_new, 8);
    assert!(!out.not_modified && out.failed.is_none());
    let s = r.store.get_stream("s").unwrap();
    assert_eq!(s.status, StreamStatus::Processed);
    assert!(s.etag.is_some());
    assert_eq!(s.next_due, t0() + chrono::TimeDelta::seconds(60));

    r.clock.advance(Duration::from_secs(60));
    let m2 = picked_message(&r, "s");
    let out = r.worker.process_message(m2.clone()).await;
    assert_eq!((out.items_seen, out.items_new), (8, 5));
    assert_eq!(r.store.item_count_for("s"), 13);
    assert_eq!(r.monitor.totals().items_ingested, 13);
    assert_eq!(*r.acks.ids.lock().unwrap(), vec![m1.message_id, m2.message_id]);
    sim.stop().await;
}

#[tokio::test]
async fn unchanged_feed_is_not_modified() {
    let sim = SimServer::start(SimScenario {
        feed_count: 1,
        duplicate_fraction: 1.0,
        ..Default::default()
    })
    .await
    .unwrap();
    let r = rig();
    add_stream(&r, "s", &sim.feed_url(0));
    r.worker.process_message(picked_message(&r, "s")).await;
    let etag = r.store.get_stream("s").unwrap().etag;
    r.clock.advance(Duration::from_secs(60));
    let out = r.worker.process_message(picked_message(&r, "s")).await;
    assert!(out.not_modified);
    assert_eq!(out.items_new, 0);
    let s = r.store.get_stream("s").unwrap();
    assert_eq!(s.status, StreamStatus::Processed);
    assert_eq!(s.etag, etag);
    let log = sim.stop().await;
    assert_eq!(log.last().unwrap().body_bytes, 0);
}

#[tokio::test]
async fn cut_connection_fails_and_backs_off() {
    let sim = SimServer::start(SimScenario {
        feed_count: 1,
        fault: Some(FaultSpec {
            kind: FaultKind::MidBodyCut,
            probability: 1.0,
        }),
        ..Default::default()
    })
    .await
    .unwrap();
    let r = rig();
    add_stream(&r, "s", &sim.feed_url(0));
    let m = picked_message(&r, "s");
    let out = r.worker.process_message(m.clone()).await;
    assert_eq!(out.failed, Some(ProcessFailure::Fetch(FailReason::Connection)));
    let s = r.store.get_stream("s").unwrap();
    assert_eq!(s.status, StreamStatus::Failed);
    assert_eq!(s.consecutive_failures, 1);
    assert_eq!(s.next_due, t0() + chrono::TimeDelta::seconds(120));
    // completed, so the queue will not redeliver it
    assert_eq!(*r.acks.ids.lock().unwrap(), vec![m.message_id]);
    sim.stop().await;
}

#[tokio::test]
async fn permanent_redirect_rewrites_url() {
    let sim = SimServer::start(SimScenario {
        feed_count: 1,
        redirect_hops: 2,
        ..Default::default()
    })
    .await
    .unwrap();
    let r = rig();
    add_stream(&r, "s", &sim.feed_url(0));
    r.worker.process_message(picked_message(&r, "s")).await;
    let s = r.store.get_stream("s").unwrap();
    assert_eq!(s.url.path(), "/feeds/0/hop/2");
    r.clock.advance(Duration::from_secs(60));
    r.worker.process_message(picked_message(&r, "s")).await;
    let log = sim.stop().await;
    // second poll goes straight to the final location
    assert_eq!(log.len(), 4);
    assert_eq!(log[3].path, "/feeds/0/hop/2");
}

#[tokio::test]
async fn deleted_stream_completes_without_writes() {
    let r = rig();
    let m = QueueMessage::new("gone", ChannelKind::News, MessageClass::Main, t0());
    let out = r.worker.process_message(m.clone()).await;
    assert!(out.unknown_stream);
    assert_eq!(r.store.stream_count(), 0);
    assert_eq!(r.store.item_count(), 0);
    assert_eq!(*r.acks.ids.lock().unwrap(), vec![m.message_id]);
}

#[tokio::test]
async fn bad_body_is_a_parse_failure() {
    let r = rig();
    // a tiny server that answers with HTML
    let app = axum::Router::new().route("/", axum::routing::get(|| async { "<html><body>hi</body></html>" }));
    let l = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = l.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(l, app).await.unwrap() });
    add_stream(&r, "s", &url::Url::parse(&format!("http://{addr}/")).unwrap());
    let out = r.worker.process_message(picked_message(&r, "s")).await;
    assert!(matches!(out.failed, Some(ProcessFailure::Parse(ParseError::UnknownFormat(_)))));
    assert_eq!(r.store.get_stream("s").unwrap().status, StreamStatus::Failed);
}

struct DropAll(AtomicU64);

impl FaultInjector for DropAll {
    fn on_message(&self, _msg: &QueueMessage) -> FaultAction {
        self.0.fetch_add(1, Ordering::Relaxed);
        FaultAction::DropBeforeMark
    }
}

#[tokio::test]
async fn dropped_message_leaves_stream_in_process() {
    let clock = Arc::new(ManualClock::new(t0()));
    let store = Store::in_memory(clock.clone());
    let acks = Arc::new(Acks::default());
    let faults = Arc::new(DropAll(AtomicU64::new(0)));
    let worker = Worker::new(
        store.clone(),
        Fetcher::new(FetchConfig::default()),
        Arc::new(Monitor::new(MonitorConfig::default(), clock.clone())),
        clock.clone(),
        acks.clone(),
    )
    .with_faults(faults.clone());
    let s = validate_stream(
        StreamDraft {
            id: Some("s".into()),
            url: "http://127.0.0.1:9/feed".into(),
            channels: vec![ChannelKind::News],
            ..Default::default()
        },
        t0(),
    )
    .unwrap();
    store.create_stream(s).unwrap();
    store.force_pick("s", t0()).unwrap();
    let out = worker
        .process_message(QueueMessage::new("s", ChannelKind::News, MessageClass::Main, t0()))
        .await;
    assert!(out.dropped);
    assert_eq!(store.get_stream("s").unwrap().status, StreamStatus::InProcess);
    assert!(acks.ids.lock().unwrap().is_empty());
}

/// Full store state for equality checks.
fn snapshot(store: &Store) -> (Vec<String>, BTreeSet<String>) {
    let streams = store
        .list_streams()
        .into_iter()
        .map(|s| serde_json::to_string(&s).unwrap())
        .collect();
    let items = store.fingerprints().into_iter().collect();
    (streams, items)
}

#[tokio::test]
async fn redelivery_leaves_store_unchanged() {
    for (seed, mode) in [(1, ValidatorMode::Ignore), (2, ValidatorMode::HonorEtag), (3, ValidatorMode::HonorLastModified)] {
        let sim = SimServer::start(SimScenario {
            feed_count: 3,
            items_per_poll: ItemsPerPoll::Constant(seed as u32 + 3),
            duplicate_fraction: 1.0,
            validator_mode: mode,
            rng_seed: seed,
            feed_format: SimFormat::Mixed,
            ..Default::default()
        })
        .await
        .unwrap();
        let r = rig();
        for i in 0..3 {
            add_stream(&r, &format!("s{i}"), &sim.feed_url(i));
        }
        let msgs: Vec<_> = (0..3).map(|i| picked_message(&r, &format!("s{i}"))).collect();
        for m in &msgs {
            r.worker.process_message(m.clone()).await;
        }
        let once = snapshot(&r.store);
        for m in &msgs {
            let again = r.worker.process_message(m.clone()).await;
            assert_eq!(again.items_new, 0);
            assert!(again.already_marked);
        }
        assert_eq!(snapshot(&r.store), once, "mode {mode:?}");
        // each delivery acknowledged once
        assert_eq!(r.acks.ids.lock().unwrap().len(), 6);
        sim.stop().await;
    }
}

#[tokio::test]
async fn social_channels_tag_their_requests() {
    let sim = SimServer::start(SimScenario {
        feed_count: 1,
        ..Default::default()
    })
    .await
    .unwrap();
    let r = rig();
    add_stream(&r, "s", &sim.feed_url(0));
    r.store.force_pick("s", t0()).unwrap();
    let m = QueueMessage::new("s", ChannelKind::Facebook, MessageClass::Main, t0());
    r.worker.process_message(m).await;
    let log = sim.stop().await;
    assert_eq!(log[0].channel.as_deref(), Some("facebook"));
}

struct AckOnly;

impl FaultInjector for AckOnly {
    fn on_message(&self, _msg: &QueueMessage) -> FaultAction {
        FaultAction::AckWithoutMark
    }
}

#[tokio::test]
async fn acked_without_mark_leaves_stream_for_the_stale_sweep() {
    let r = rig();
    let worker = Worker::new(
        r.store.clone(),
        Fetcher::new(FetchConfig::default()),
        r.monitor.clone(),
        r.clock.clone(),
        r.acks.clone(),
    )
    .with_faults(Arc::new(AckOnly));
    add_stream(&r, "s", &url::Url::parse("http://127.0.0.1:9/feed").unwrap());
    let m = picked_message(&r, "s");
    let out = worker.process_message(m.clone()).await;
    assert!(out.dropped);
    assert_eq!(r.store.get_stream("s").unwrap().status, StreamStatus::InProcess);
    assert_eq!(*r.acks.ids.lock().unwrap(), vec![m.message_id]);
    let stale = r
        .store
        .recover_stale(r.clock.now() + chrono::TimeDelta::minutes(16), Duration::from_secs(900), 10)
        .unwrap();
    assert_eq!(stale.len(), 1);
}
