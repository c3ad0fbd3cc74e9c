//! Serves simulated feeds until interrupted, so the service or curl can be
//! pointed at them.
//!
//! ```text
//! cargo run --example feedsim_server -- '{"feed_count": 5, "feed_format": "Atom"}'
//! curl -i http://127.0.0.1:8700/feeds/0
//! ```

use feedmix::feedsim::{SimScenario, SimServer};

#[tokio::main]
async fn main() {
    let scenario = match std::env::args().nth(1) {
        Some(json) => SimScenario::from_json(&json).unwrap_or_else(|e| {
            eprintln!("bad scenario: {e}");
            std::process::exit(2);
        }),
        None => SimScenario::default(),
    };
    let addr = "127.0.0.1:8700".parse().unwrap();
    let sim = SimServer::start_on(scenario, addr).await.expect("bind 127.0.0.1:8700");
    for i in 0..sim.scenario().feed_count.min(5) {
        println!("{}", sim.feed_url(i));
    }
    println!("serving {} feeds, ctrl-c to stop", sim.scenario().feed_count);
    tokio::signal::ctrl_c().await.unwrap();
    let log = sim.stop().await;
    println!("served {} requests", log.len());
}
