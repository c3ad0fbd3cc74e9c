//! Runs a short load and writes the per-bucket counters as CSV and as an
//! SVG chart next to the current directory.

use std::sync::Arc;
use std::time::Duration;

use chrono::Utc;
use feedmix::app::render_svg;
use feedmix::clock::{Clock, ScaledClock};
use feedmix::feedsim::{SimScenario, SimServer};
use feedmix::model::{validate_stream, ChannelKind, StreamDraft};
use feedmix::monitor::to_csv;
use feedmix::pipeline::{Pipeline, PipelineConfig, PipelineHooks};
use feedmix::store::Store;

#[tokio::main]
async fn main() {
    let sim = SimServer::start(SimScenario {
        feed_count: 200,
        ..Default::default()
    })
    .await
    .expect("sim server");
    let clock: Arc<dyn Clock> = Arc::new(ScaledClock::new(Utc::now(), 20.0));
    let store = Store::in_memory(clock.clone());
    for i in 0..200 {
        let draft = StreamDraft {
            id: Some(format!("s{i}")),
            url: sim.feed_url(i).to_string(),
            channels: vec![ChannelKind::ALL[i % 4]],
            poll_interval: Some(60),
            next_due: Some(clock.now() + chrono::TimeDelta::milliseconds(300 * i as i64)),
            ..Default::default()
        };
        store.create_stream(validate_stream(draft, clock.now()).unwrap()).unwrap();
    }
    let mut config = PipelineConfig::default();
    config.monitor.window = Duration::from_secs(10);
    let p = Pipeline::start(config, store, clock.clone(), PipelineHooks::default());
    tokio::time::sleep(clock.to_real(Duration::from_secs(300))).await;
    let buckets = p.monitor().snapshot(30);
    p.stop(Duration::from_secs(5)).await;
    sim.stop().await;

    std::fs::write("metrics.csv", to_csv(&buckets)).unwrap();
    std::fs::write("metrics.svg", render_svg(&buckets)).unwrap();
    println!("wrote {} buckets to metrics.csv and metrics.svg", buckets.len());
}
