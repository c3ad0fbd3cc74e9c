//! Checkers shared by the property tests and the acceptance run.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::{Arc, Barrier, Mutex};
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use feedmix::clock::{Clock, ManualClock};
use feedmix::dispatch::Completer;
use feedmix::feedsim::*;
use feedmix::model::{item_fingerprint, validate_stream, ChannelKind, MessageClass, QueueMessage, StreamDraft};
use feedmix::monitor::{Monitor, MonitorConfig};
use feedmix::queue::{DualQueue, QueueConfig, QueueError};
use feedmix::store::{Store, StoreError};
use feedmix::worker::{FetchConfig, Fetcher, Worker};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2018, 6, 17, 15, 0, 0).unwrap()
}

pub fn draft(id: &str, url: &str, channels: Vec<ChannelKind>, interval: u64) -> StreamDraft {
    StreamDraft {
        id: Some(id.into()),
        url: url.into(),
        channels,
        poll_interval: Some(interval),
        ..Default::default()
    }
}

// ---------------------------------------------------------------- queue

/// Reference model: two plain FIFOs plus a lease table.
struct RefQueue {
    capacity: usize,
    visibility_ms: i64,
    now_ms: i64,
    visible: [VecDeque<(u64, String)>; 2],
    flight: BTreeMap<String, (u64, usize, i64)>,
    seq_of: HashMap<String, u64>,
    next_seq: u64,
}

impl RefQueue {
    fn depth(&self) -> usize {
        self.visible[0].len() + self.visible[1].len() + self.flight.len()
    }

    fn receive(&mut self, max: usize) -> Vec<String> {
        let mut lapsed: Vec<(u64, usize, String)> = self
            .flight
            .iter()
            .filter(|(_, (_, _, until))| *until <= self.now_ms)
            .map(|(id, (seq, class, _))| (*seq, *class, id.clone()))
            .collect();
        lapsed.sort();
        for (seq, class, id) in lapsed.into_iter().rev() {
            self.flight.remove(&id);
            self.visible[class].push_front((seq, id));
        }
        let mut out = Vec::new();
        while out.len() < max {
            // index 1 is the priority class
            let next = self.visible[1]
                .pop_front()
                .map(|e| (e, 1))
                .or_else(|| self.visible[0].pop_front().map(|e| (e, 0)));
            let Some(((seq, id), class)) = next else { break };
            self.flight.insert(id.clone(), (seq, class, self.now_ms + self.visibility_ms));
            out.push(id);
        }
        out
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ModelReport {
    pub schedules: usize,
    pub ops: usize,
    pub deliveries: usize,
    pub redeliveries: usize,
}

/// Runs `schedules` random operation sequences against the queue and an
/// independent model, checking every response, conservation after every
/// step and first-delivery FIFO order within each class.
pub fn queue_model_check(schedules: usize, seed: u64) -> Result<ModelReport, String> {
    let mut report = ModelReport::default();
    for schedule in 0..schedules {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (schedule as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let clock = Arc::new(ManualClock::new(t0()));
        let capacity = rng.random_range(3..40);
        let visibility_s = rng.random_range(1..8);
        let q = DualQueue::new(
            QueueConfig {
                capacity,
                visibility_timeout: Duration::from_secs(visibility_s),
            },
            clock.clone(),
        );
        let mut m = RefQueue {
            capacity,
            visibility_ms: visibility_s as i64 * 1000,
            now_ms: 0,
            visible: [VecDeque::new(), VecDeque::new()],
            flight: BTreeMap::new(),
            seq_of: HashMap::new(),
            next_seq: 0,
        };
        let mut deleted = 0u64;
        let mut sent = 0u64;
        let mut last_first_delivery = [None::<u64>; 2];
        let ops = rng.random_range(10..80);
        for step in 0..ops {
            let ctx = |what: &str| format!("schedule {schedule} step {step}: {what}");
            match rng.random_range(0..10) {
                0..=3 => {
                    let k = rng.random_range(1..4);
                    let msgs: Vec<QueueMessage> = (0..k)
                        .map(|i| {
                            let class = if rng.random_bool(0.3) {
                                MessageClass::Priority
                            } else {
                                MessageClass::Main
                            };
                            QueueMessage::new(format!("s{step}-{i}"), ChannelKind::News, class, clock.now())
                        })
                        .collect();
                    let res = q.send_batch(msgs.clone());
                    if m.depth() + k > m.capacity {
                        if !matches!(res, Err(QueueError::QueueFull { .. })) {
                            return Err(ctx("send over capacity accepted"));
                        }
                    } else {
                        let ids = res.map_err(|e| ctx(&format!("send refused: {e}")))?;
                        if ids.len() != k {
                            return Err(ctx("send returned wrong id count"));
                        }
                        for msg in msgs {
                            let class = usize::from(msg.priority == MessageClass::Priority);
                            m.seq_of.insert(msg.message_id.clone(), m.next_seq);
                            m.visible[class].push_back((m.next_seq, msg.message_id));
                            m.next_seq += 1;
                            sent += 1;
                        }
                    }
                }
                4..=6 => {
                    let max = rng.random_range(1..6);
                    let got = q.receive(max, clock.now());
                    let want = m.receive(max);
                    let ids: Vec<String> = got.iter().map(|g| g.message_id.clone()).collect();
                    if ids != want {
                        return Err(ctx(&format!("receive mismatch: got {ids:?}, model {want:?}")));
                    }
                    for g in &got {
                        report.deliveries += 1;
                        if g.receive_count > 1 {
                            report.redeliveries += 1;
                            continue;
                        }
                        let class = usize::from(g.priority == MessageClass::Priority);
                        let seq = m.seq_of[&g.message_id];
                        if last_first_delivery[class].is_some_and(|prev| prev >= seq) {
                            return Err(ctx("first deliveries out of send order"));
                        }
                        last_first_delivery[class] = Some(seq);
                    }
                }
                7 | 8 => {
                    let id = if !m.flight.is_empty() && rng.random_bool(0.8) {
                        // ids are random uuids; pick by send order to keep runs reproducible
                        let mut by_seq: Vec<(&u64, &String)> = m.flight.iter().map(|(id, (seq, ..))| (seq, id)).collect();
                        by_seq.sort();
                        by_seq[rng.random_range(0..by_seq.len())].1.clone()
                    } else {
                        "not-a-message".to_owned()
                    };
                    let res = q.delete(&id);
                    if m.flight.remove(&id).is_some() {
                        res.map_err(|e| ctx(&format!("delete of in-flight refused: {e}")))?;
                        deleted += 1;
                    } else if !matches!(res, Err(QueueError::NotInFlight(_))) {
                        return Err(ctx("delete of unknown id accepted"));
                    }
                }
                _ => {
                    let ms = rng.random_range(0..4000);
                    clock.advance(Duration::from_millis(ms));
                    m.now_ms += ms as i64;
                }
            }
            let s = q.stats();
            if s.sent.total() != s.deleted.total() + s.depths.total() as u64 {
                return Err(ctx(&format!("conservation broken: {s:?}")));
            }
            if s.sent.total() != sent || s.deleted.total() != deleted || s.depths.total() != m.depth() {
                return Err(ctx(&format!("counters disagree with model: {s:?}")));
            }
            if s.depths.total() > capacity {
                return Err(ctx("depth above capacity"));
            }
            report.ops += 1;
        }
        report.schedules += 1;
    }
    Ok(report)
}

// ---------------------------------------------------------------- store

#[derive(Debug, Default, Clone, Copy)]
pub struct RaceReport {
    pub trials: usize,
    pub picks: usize,
    pub double_picks: usize,
}

/// Eight threads race to claim the same due streams; every stream must be
/// claimed exactly once per trial. Every tenth trial uses the on-disk store.
pub fn store_pick_race(trials: usize, seed: u64) -> RaceReport {
    const STREAMS: usize = 64;
    const THREADS: usize = 8;
    let mut report = RaceReport::default();
    for trial in 0..trials {
        let clock: Arc<dyn Clock> = Arc::new(ManualClock::new(t0()));
        let dir = tempfile::tempdir().unwrap();
        let store = if trial % 10 == 0 {
            Store::open(dir.path(), clock.clone()).unwrap()
        } else {
            Store::in_memory(clock.clone())
        };
        for i in 0..STREAMS {
            let s = validate_stream(draft(&format!("s{i}"), "http://x/feed", vec![ChannelKind::News], 60), t0()).unwrap();
            store.create_stream(s).unwrap();
        }
        let barrier = Arc::new(Barrier::new(THREADS));
        let claims = Arc::new(Mutex::new(Vec::<String>::new()));
        let handles: Vec<_> = (0..THREADS)
            .map(|t| {
                let (store, barrier, claims) = (store.clone(), barrier.clone(), claims.clone());
                let mut rng = ChaCha8Rng::seed_from_u64(seed + (trial * THREADS + t) as u64);
                std::thread::spawn(move || {
                    barrier.wait();
                    loop {
                        let got: Vec<String> = if rng.random_bool(0.2) {
                            let id = format!("s{}", rng.random_range(0..STREAMS));
                            match store.force_pick(&id, t0()) {
                                Ok(s) => vec![s.id],
                                Err(StoreError::IllegalTransition { .. }) => Vec::new(),
                                Err(e) => panic!("{e}"),
                            }
                        } else {
                            let limit = rng.random_range(1..8);
                            let picked = store.pick_due_streams(t0(), Duration::ZERO, limit).unwrap();
                            if picked.is_empty() {
                                break;
                            }
                            picked.into_iter().map(|s| s.id).collect()
                        };
                        claims.lock().unwrap().extend(got);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let claims = claims.lock().unwrap();
        let distinct: BTreeSet<&String> = claims.iter().collect();
        report.trials += 1;
        report.picks += claims.len();
        report.double_picks += claims.len() - distinct.len();
        assert_eq!(distinct.len(), STREAMS, "trial {trial}: some stream never claimed");
    }
    report
}

// ---------------------------------------------------------------- worker

#[derive(Default)]
pub struct Acks {
    pub ids: Mutex<Vec<String>>,
}

impl Completer for Acks {
    fn complete(&self, message_id: &str) {
        self.ids.lock().unwrap().push(message_id.to_owned());
    }
}

pub fn snapshot(store: &Store) -> (Vec<String>, BTreeSet<String>) {
    let streams = store
        .list_streams()
        .into_iter()
        .map(|s| serde_json::to_string(&s).unwrap())
        .collect();
    (streams, store.fingerprints().into_iter().collect())
}

/// Processes one delivery per stream, then redelivers each message and
/// requires byte-identical store state. Feeds repeat their content, so any
/// difference comes from the worker rather than from new upstream items.
pub async fn redelivery_is_idempotent(seed: u64, mode: ValidatorMode) -> Result<(), String> {
    const FEEDS: usize = 4;
    let sim = SimServer::start(SimScenario {
        feed_count: FEEDS,
        items_per_poll: ItemsPerPoll::Constant(2 + (seed % 5) as u32),
        duplicate_fraction: 1.0,
        validator_mode: mode,
        rng_seed: seed,
        feed_format: SimFormat::Mixed,
        ..Default::default()
    })
    .await
    .map_err(|e| e.to_string())?;
    let clock = Arc::new(ManualClock::new(t0()));
    let store = Store::in_memory(clock.clone());
    let acks = Arc::new(Acks::default());
    let worker = Worker::new(
        store.clone(),
        Fetcher::new(FetchConfig {
            timeout: Duration::from_secs(5),
            ..Default::default()
        }),
        Arc::new(Monitor::new(MonitorConfig::default(), clock.clone())),
        clock.clone(),
        acks.clone(),
    );
    for i in 0..FEEDS {
        let s = validate_stream(draft(&format!("s{i}"), sim.feed_url(i).as_str(), vec![ChannelKind::News], 60), t0())
            .unwrap();
        store.create_stream(s).unwrap();
    }
    let mut result = Ok(());
    'rounds: for round in 0..3 {
        let msgs: Vec<QueueMessage> = (0..FEEDS)
            .map(|i| {
                let id = format!("s{i}");
                store.force_pick(&id, clock.now()).unwrap();
                QueueMessage::new(id, ChannelKind::News, MessageClass::Main, clock.now())
            })
            .collect();
        for m in &msgs {
            worker.process_message(m.clone()).await;
        }
        let once = snapshot(&store);
        for m in &msgs {
            let again = worker.process_message(m.clone()).await;
            if again.items_new != 0 {
                result = Err(format!("round {round}: redelivery stored {} new items", again.items_new));
                break 'rounds;
            }
        }
        if snapshot(&store) != once {
            result = Err(format!("round {round}: store changed on redelivery ({mode:?})"));
            break;
        }
        clock.advance(Duration::from_secs(60));
    }
    sim.stop().await;
    result?;
    let acked = acks.ids.lock().unwrap().len();
    if acked != FEEDS * 6 {
        return Err(format!("expected {} completions, saw {acked}", FEEDS * 6));
    }
    Ok(())
}

// ---------------------------------------------------------------- goldens

/// Digests computed with `sha256sum` over the literal preimages.
pub const GOLDENS: [(&str, Option<&str>, &str, &str); 2] = [
    ("s1", Some("g1"), "", "2c15c4d65bf2fbb386878ca79888db4410d49cda99522efe05c984e0b9190cc8"),
    ("s2", None, "http://x/1", "6e5a63de567f6e751e8221f731ba48c24efa5043eeeec3e3cfcc0103de4b073a"),
];

pub fn goldens_hold() -> Result<(), String> {
    for (stream, guid, link, want) in GOLDENS {
        let got = item_fingerprint(stream, guid, link).map_err(|e| e.to_string())?;
        if got != want {
            return Err(format!("fingerprint({stream}, {guid:?}, {link}) = {got}, want {want}"));
        }
    }
    Ok(())
}
