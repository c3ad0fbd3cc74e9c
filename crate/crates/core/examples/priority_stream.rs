//! Starts the admin service over a backlog of streams, then registers one
//! more stream and prioritizes it over HTTP. The prioritized stream is
//! processed long before the backlog drains.

use std::sync::Arc;
use std::time::{Duration, Instant};

use feedmix::app::{AppConfig, Service};
use feedmix::clock::SystemClock;
use feedmix::feedsim::{ServiceDelay, SimScenario, SimServer};
use feedmix::model::StreamStatus;
use serde_json::json;

#[tokio::main]
async fn main() {
    let backlog = 2000;
    let sim = SimServer::start(SimScenario {
        feed_count: backlog + 1,
        service_delay: ServiceDelay::ConstantMs(20),
        ..Default::default()
    })
    .await
    .expect("sim server");
    let dir = tempfile::tempdir().unwrap();
    let mut config = AppConfig {
        store_root: dir.path().to_owned(),
        admin_listen: "127.0.0.1:0".parse().unwrap(),
        ..Default::default()
    };
    config.pipeline.dispatch.resize_enabled = false;
    let svc = Service::start(config, Arc::new(SystemClock)).await.expect("service");
    let http = reqwest::Client::new();
    let base = svc.base_url();

    for i in 0..backlog {
        let body = json!({ "id": format!("b{i}"), "url": sim.feed_url(i), "channels": ["News"] });
        http.post(format!("{base}/streams")).json(&body).send().await.unwrap();
    }
    // far in the future, so only prioritizing will poll it
    let late = json!({ "id": "urgent", "url": sim.feed_url(backlog), "channels": ["News"], "next_due": "2100-01-01T00:00:00Z" });
    http.post(format!("{base}/streams")).json(&late).send().await.unwrap();
    tokio::time::sleep(Duration::from_secs(6)).await;

    let started = Instant::now();
    let r = http.post(format!("{base}/streams/urgent/prioritize")).send().await.unwrap();
    println!("prioritize -> {}", r.status());
    let store = svc.pipeline().store().clone();
    let queue = svc.pipeline().queue().clone();
    loop {
        if store.get_stream("urgent").is_ok_and(|s| s.status == StreamStatus::Processed) {
            let q = queue.stats();
            println!(
                "urgent processed after {:.2}s with {} of {backlog} backlog messages still waiting",
                started.elapsed().as_secs_f64(),
                q.sent.main - q.deleted.main
            );
            break;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    svc.stop().await;
    sim.stop().await;
}

