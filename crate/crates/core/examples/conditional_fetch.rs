//! Fetches the same feed twice, the second time with the validators from
//! the first response, and parses the body.

use feedmix::feedsim::{SimScenario, SimServer, ValidatorMode};
use feedmix::worker::{parse_feed, FetchConfig, FetchOutcome, Fetcher};

#[tokio::main]
async fn main() {
    let sim = SimServer::start(SimScenario {
        feed_count: 1,
        duplicate_fraction: 1.0,
        validator_mode: ValidatorMode::HonorEtag,
        ..Default::default()
    })
    .await
    .expect("sim server");
    let url = sim.feed_url(0);
    let fetcher = Fetcher::new(FetchConfig::default());

    let first = fetcher.fetch_conditional(&url, None, None).await;
    let FetchOutcome::Modified { body, charset, etag, last_modified } = first.outcome else {
        panic!("expected a body, got {:?}", first.outcome);
    };
    let feed = parse_feed(&body, charset.as_deref()).expect("parse");
    println!("200 {:?} with {} items, etag {etag:?}", feed.format, feed.items.len());
    for item in &feed.items {
        println!("  {}", item.title);
    }

    let second = fetcher.fetch_conditional(&url, etag.as_deref(), last_modified.as_deref()).await;
    println!("{:?} {:?}", second.status, second.outcome);
    sim.stop().await;
}
