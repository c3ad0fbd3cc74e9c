//! Polls ten simulated feeds for a minute of accelerated time and prints
//! what landed in the store.

use std::sync::Arc;
use std::time::Duration;

use chrono::Utc;
use feedmix::clock::{Clock, ScaledClock};
use feedmix::feedsim::{ItemsPerPoll, SimScenario, SimServer};
use feedmix::model::{validate_stream, ChannelKind, StreamDraft};
use feedmix::pipeline::{Pipeline, PipelineConfig, PipelineHooks};
use feedmix::store::Store;

#[tokio::main]
async fn main() {
    let sim = SimServer::start(SimScenario {
        feed_count: 10,
        items_per_poll: ItemsPerPoll::Constant(2),
        ..Default::default()
    })
    .await
    .expect("sim server");

    // one real second is thirty seconds of scheduler time
    let clock: Arc<dyn Clock> = Arc::new(ScaledClock::new(Utc::now(), 30.0));
    let store = Store::in_memory(clock.clone());
    for i in 0..10 {
        let draft = StreamDraft {
            id: Some(format!("feed-{i}")),
            url: sim.feed_url(i).to_string(),
            channels: vec![ChannelKind::ALL[i % 4]],
            poll_interval: Some(20),
            ..Default::default()
        };
        store.create_stream(validate_stream(draft, clock.now()).unwrap()).unwrap();
    }

    let pipeline = Pipeline::start(PipelineConfig::default(), store.clone(), clock.clone(), PipelineHooks::default());
    tokio::time::sleep(clock.to_real(Duration::from_secs(60))).await;
    pipeline.stop(Duration::from_secs(5)).await;
    sim.stop().await;

    println!("{} items from {} streams", store.item_count(), store.stream_count());
    for s in store.list_streams() {
        println!("  {:8} {:3} items, {:?}", s.id, store.item_count_for(&s.id), s.status);
    }
}
