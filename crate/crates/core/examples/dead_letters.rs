//! Overloads tiny mailboxes and a small queue so messages are dead
//! lettered, then prints the per-bucket counts and the alerts raised.

use std::sync::Arc;
use std::time::Duration;

use chrono::Utc;
use feedmix::clock::{Clock, ScaledClock};
use feedmix::feedsim::{SimScenario, SimServer};
use feedmix::model::{validate_stream, ChannelKind, StreamDraft};
use feedmix::monitor::DeadLetterReason;
use feedmix::pipeline::{Pipeline, PipelineConfig, PipelineHooks};
use feedmix::store::Store;

#[tokio::main]
async fn main() {
    let sim = SimServer::start(SimScenario {
        feed_count: 300,
        ..Default::default()
    })
    .await
    .expect("sim server");
    let clock: Arc<dyn Clock> = Arc::new(ScaledClock::new(Utc::now(), 10.0));
    let store = Store::in_memory(clock.clone());
    for i in 0..300 {
        let draft = StreamDraft {
            id: Some(format!("s{i}")),
            url: sim.feed_url(i).to_string(),
            channels: vec![ChannelKind::ALL[i % 4]],
            poll_interval: Some(600),
            ..Default::default()
        };
        store.create_stream(validate_stream(draft, clock.now()).unwrap()).unwrap();
    }

    let mut config = PipelineConfig::default();
    config.queue.capacity = 50;
    config.dispatch.mailbox_capacity = 4;
    config.dispatch.resize_enabled = false;
    config.dispatch.initial_pool_size = 1;
    config.monitor.window = Duration::from_secs(10);
    config.monitor.alert_threshold = 5;
    let hooks = PipelineHooks {
        faults: None,
        slowdown: Some(Duration::from_millis(500)),
    };
    let p = Pipeline::start(config, store, clock.clone(), hooks);
    tokio::time::sleep(clock.to_real(Duration::from_secs(90))).await;
    let monitor = p.monitor().clone();
    p.stop(Duration::from_secs(5)).await;
    sim.stop().await;

    for b in monitor.snapshot(usize::MAX) {
        println!("{} sent {:4} dead {:4}", b.window_start.format("%H:%M:%S"), b.sent, b.dead_lettered);
    }
    println!(
        "mailbox overflow {}, queue full {}",
        monitor.dead_letter_count(DeadLetterReason::MailboxOverflow),
        monitor.dead_letter_count(DeadLetterReason::QueueFull)
    );
    for a in monitor.alerts() {
        println!("alert: {} dead letters in bucket {}", a.count, a.bucket.format("%H:%M:%S"));
    }
}
