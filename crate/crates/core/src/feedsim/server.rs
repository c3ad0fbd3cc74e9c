use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::Response;
use axum::routing::get;
use chrono::{DateTime, TimeDelta, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::watch;
use tokio::task::JoinHandle;
use url::Url;

use super::render::{render_feed, sim_item};
use super::{sample_delay, sample_fault, FaultKind, FeedGen, SimScenario, ValidatorMode};
use crate::worker::fetch::CHANNEL_HEADER;
use crate::worker::FeedFormat;

#[derive(Debug, Error)]
pub enum StartupError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
}

/// One request as the simulator saw it. Status 0 marks a request that was
/// never answered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub seq: u64,
    pub path: String,
    pub feed: Option<usize>,
    pub if_none_match: Option<String>,
    pub if_modified_since: Option<String>,
    pub channel: Option<String>,
    pub status: u16,
    pub body_bytes: usize,
    /// Validator of the feed's current content when the request arrived.
    pub current_etag: Option<String>,
    pub poll: Option<u64>,
}

struct FeedState {
    gen: FeedGen,
    requests: u64,
    prev_etag: Option<String>,
    prev_modified: DateTime<Utc>,
}

struct Shared {
    scenario: SimScenario,
    feeds: Vec<Mutex<FeedState>>,
    log: Mutex<Vec<RequestRecord>>,
    seq: AtomicU64,
    closing: watch::Receiver<bool>,
}

/// How long a `Timeout` fault holds the connection open.
const TIMEOUT_HOLD: Duration = Duration::from_secs(3600);

fn modified_epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2018, 6, 1, 0, 0, 0).unwrap()
}

fn etag_of(body: &str) -> String {
    let d = Sha256::digest(body.as_bytes());
    format!("\"{}\"", &hex::encode(d)[..16])
}

fn header_string(h: &HeaderMap, name: impl header::AsHeaderName) -> Option<String> {
    h.get(name).and_then(|v| v.to_str().ok()).map(str::to_owned)
}

fn etag_matches(header: &str, etag: &str) -> bool {
    header.split(',').map(str::trim).any(|t| {
        t == "*" || t == etag || t.strip_prefix("W/") == Some(etag)
    })
}

impl Shared {
    fn record(&self, mut rec: RequestRecord) {
        let mut log = self.log.lock().unwrap();
        rec.seq = log.len() as u64;
        log.push(rec);
    }

    async fn serve(&self, feed: usize, hop: u32, headers: HeaderMap, path: String) -> Response {
        self.seq.fetch_add(1, Ordering::Relaxed);
        let mut rec = RequestRecord {
            seq: 0,
            path,
            feed: Some(feed),
            if_none_match: header_string(&headers, header::IF_NONE_MATCH),
            if_modified_since: header_string(&headers, header::IF_MODIFIED_SINCE),
            channel: header_string(&headers, CHANNEL_HEADER),
            status: 0,
            body_bytes: 0,
            current_etag: None,
            poll: None,
        };
        let sc = &self.scenario;
        if feed >= sc.feed_count || hop > sc.redirect_hops {
            rec.feed = None;
            rec.status = 404;
            self.record(rec);
            return status_only(StatusCode::NOT_FOUND);
        }
        let request_no = {
            let mut st = self.feeds[feed].lock().unwrap();
            st.requests += 1;
            st.requests - 1
        };
        let delay = sample_delay(sc, feed, request_no);
        if !delay.is_zero() {
            tokio::time::sleep(delay).await;
        }

        if hop < sc.redirect_hops {
            rec.status = 301;
            self.record(rec);
            let next = format!("/feeds/{feed}/hop/{}", hop + 1);
            return Response::builder()
                .status(StatusCode::MOVED_PERMANENTLY)
                .header(header::LOCATION, next)
                .body(Body::empty())
                .unwrap();
        }

        match sample_fault(sc, feed, request_no) {
            Some(FaultKind::Timeout) => {
                self.record(rec);
                let mut closing = self.closing.clone();
                tokio::select! {
                    _ = tokio::time::sleep(TIMEOUT_HOLD) => {}
                    _ = closing.wait_for(|c| *c) => {}
                }
                return status_only(StatusCode::GATEWAY_TIMEOUT);
            }
            Some(FaultKind::Http500) => {
                rec.status = 500;
                self.record(rec);
                return status_only(StatusCode::INTERNAL_SERVER_ERROR);
            }
            Some(FaultKind::MidBodyCut) => {
                let body = self.current_body(feed);
                rec.status = 200;
                rec.body_bytes = body.len() / 2;
                self.record(rec);
                let full = body.len();
                let half = Bytes::from(body.into_bytes()).slice(..full / 2);
                let chunks: Vec<Result<Bytes, std::io::Error>> = vec![
                    Ok(half),
                    Err(std::io::Error::new(std::io::ErrorKind::ConnectionReset, "cut")),
                ];
                return Response::builder()
                    .status(StatusCode::OK)
                    .header(header::CONTENT_LENGTH, full)
                    .body(Body::from_stream(futures_util::stream::iter(chunks)))
                    .unwrap();
            }
            None => {}
        }

        let (status, body, etag, modified) = {
            let mut st = self.feeds[feed].lock().unwrap();
            let content = st.gen.peek(sc);
            let body = self.render(feed, content.indices());
            let etag = etag_of(&body);
            let modified = if st.prev_etag.as_deref() == Some(etag.as_str()) {
                st.prev_modified
            } else {
                modified_epoch() + TimeDelta::minutes(content.poll as i64)
            };
            let not_modified = match sc.validator_mode {
                ValidatorMode::HonorEtag => rec
                    .if_none_match
                    .as_deref()
                    .is_some_and(|h| etag_matches(h, &etag)),
                ValidatorMode::HonorLastModified => rec
                    .if_modified_since
                    .as_deref()
                    .and_then(|h| httpdate::parse_http_date(h).ok())
                    .is_some_and(|since| DateTime::<Utc>::from(since) >= modified),
                ValidatorMode::Ignore => false,
            };
            rec.current_etag = Some(etag.clone());
            rec.poll = Some(content.poll);
            st.gen.advance(sc);
            st.prev_etag = Some(etag.clone());
            st.prev_modified = modified;
            let status = if not_modified {
                StatusCode::NOT_MODIFIED
            } else {
                StatusCode::OK
            };
            (status, body, etag, modified)
        };

        let mut resp = Response::builder().status(status);
        let send_etag = sc.validator_mode != ValidatorMode::HonorLastModified;
        let send_modified = sc.validator_mode != ValidatorMode::HonorEtag;
        if send_etag {
            resp = resp.header(header::ETAG, &etag);
        }
        if send_modified {
            resp = resp.header(
                header::LAST_MODIFIED,
                httpdate::fmt_http_date(modified.into()),
            );
        }
        rec.status = status.as_u16();
        if status == StatusCode::NOT_MODIFIED {
            self.record(rec);
            return resp.body(Body::empty()).unwrap();
        }
        rec.body_bytes = body.len();
        self.record(rec);
        let ctype = match self.scenario.format_of(feed) {
            FeedFormat::Rss2 => "application/rss+xml; charset=utf-8",
            FeedFormat::Atom => "application/atom+xml; charset=utf-8",
        };
        resp.header(header::CONTENT_TYPE, HeaderValue::from_static(ctype))
            .body(Body::from(body))
            .unwrap()
    }

    fn render(&self, feed: usize, indices: std::ops::Range<u64>) -> String {
        let items: Vec<_> = indices.map(|n| sim_item(feed, n)).collect();
        render_feed(self.scenario.format_of(feed), feed, &items)
    }

    fn current_body(&self, feed: usize) -> String {
        let content = self.feeds[feed].lock().unwrap().gen.peek(&self.scenario);
        self.render(feed, content.indices())
    }
}

fn status_only(status: StatusCode) -> Response {
    Response::builder().status(status).body(Body::empty()).unwrap()
}

async fn feed_root(
    State(sh): State<Arc<Shared>>,
    UrlPath(feed): UrlPath<usize>,
    headers: HeaderMap,
) -> Response {
    sh.serve(feed, 0, headers, format!("/feeds/{feed}")).await
}

async fn feed_hop(
    State(sh): State<Arc<Shared>>,
    UrlPath((feed, hop)): UrlPath<(usize, u32)>,
    headers: HeaderMap,
) -> Response {
    sh.serve(feed, hop.max(1), headers, format!("/feeds/{feed}/hop/{hop}"))
        .await
}

/// A running simulator.
pub struct SimServer {
    base_url: Url,
    shared: Arc<Shared>,
    close: watch::Sender<bool>,
    task: JoinHandle<()>,
}

impl SimServer {
    pub async fn start(scenario: SimScenario) -> Result<Self, StartupError> {
        Self::start_on(scenario, SocketAddr::from(([127, 0, 0, 1], 0))).await
    }

    pub async fn start_on(scenario: SimScenario, addr: SocketAddr) -> Result<Self, StartupError> {
        scenario.validate().map_err(StartupError::Scenario)?;
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|source| StartupError::Bind { addr, source })?;
        let local = listener
            .local_addr()
            .map_err(|source| StartupError::Bind { addr, source })?;
        let (close, closing) = watch::channel(false);
        let feeds = (0..scenario.feed_count)
            .map(|i| {
                Mutex::new(FeedState {
                    gen: FeedGen::new(i),
                    requests: 0,
                    prev_etag: None,
                    prev_modified: modified_epoch(),
                })
            })
            .collect();
        let shared = Arc::new(Shared {
            scenario,
            feeds,
            log: Mutex::new(Vec::new()),
            seq: AtomicU64::new(0),
            closing: closing.clone(),
        });
        let app = axum::Router::new()
            .route("/feeds/{feed}", get(feed_root))
            .route("/feeds/{feed}/hop/{hop}", get(feed_hop))
            .with_state(shared.clone());
        let mut shutdown = closing;
        let task = tokio::spawn(async move {
            let serve = axum::serve(listener, app).with_graceful_shutdown(async move {
                let _ = shutdown.wait_for(|c| *c).await;
            });
            if let Err(e) = serve.await {
                tracing::warn!(error = %e, "feed simulator stopped with an error");
            }
        });
        let base_url = Url::parse(&format!("http://{local}/")).expect("socket url");
        Ok(Self {
            base_url,
            shared,
            close,
            task,
        })
    }

    pub fn base_url(&self) -> &Url {
        &self.base_url
    }

    pub fn feed_url(&self, feed: usize) -> Url {
        self.base_url.join(&format!("feeds/{feed}")).unwrap()
    }

    pub fn scenario(&self) -> &SimScenario {
        &self.shared.scenario
    }

    pub fn request_log(&self) -> Vec<RequestRecord> {
        self.shared.log.lock().unwrap().clone()
    }

    /// Polls served so far (200 or 304) for one feed.
    pub fn polls_served(&self, feed: usize) -> u64 {
        self.shared.feeds[feed].lock().unwrap().gen.poll()
    }

    pub async fn stop(self) -> Vec<RequestRecord> {
        let _ = self.close.send(true);
        let abort = self.task.abort_handle();
        if tokio::time::timeout(Duration::from_secs(2), self.task).await.is_err() {
            abort.abort();
        }
        self.shared.log.lock().unwrap().clone()
    }
}

pub fn write_log_jsonl(log: &[RequestRecord], path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

impl SimServer {
    pub fn write_log(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        write_log_jsonl(&self.request_log(), path)
    }
}
