//! Conditional HTTP fetching with manual redirect handling.

use std::time::Duration;

use reqwest::header::{self, HeaderMap, HeaderValue};
use reqwest::{Client, StatusCode};
use serde::Serialize;
use url::Url;

use crate::model::ChannelKind;

pub const USER_AGENT: &str = concat!("feedmix/", env!("CARGO_PKG_VERSION"));
pub const MAX_REDIRECTS: u32 = 5;
/// Header naming the social channel a request is made for.
pub const CHANNEL_HEADER: &str = "x-feedmix-channel";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum FailReason {
    Timeout,
    Dns,
    Tls,
    /// Refused, reset, or cut off mid-body.
    Connection,
    Http4xx,
    Http5xx,
    TooManyRedirects,
    /// A 3xx without a usable Location.
    BadRedirect,
}

impl std::fmt::Display for FailReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FetchOutcome {
    Modified {
        body: Vec<u8>,
        charset: Option<String>,
        etag: Option<String>,
        last_modified: Option<String>,
    },
    NotModified,
    Failed(FailReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchResult {
    pub outcome: FetchOutcome,
    /// Status of the final response, if one arrived.
    pub status: Option<u16>,
    pub final_url: Url,
    pub hops: u32,
    /// Where the chain of permanent (301/308) hops from the request URL
    /// ended, if it moved at all.
    pub permanent_url: Option<Url>,
}

impl FetchResult {
    pub fn redirected(&self) -> bool {
        self.hops > 0
    }

    pub fn failure(&self) -> Option<FailReason> {
        match self.outcome {
            FetchOutcome::Failed(r) => Some(r),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FetchConfig {
    /// Bound on the whole exchange, redirects and body included.
    pub timeout: Duration,
    pub max_redirects: u32,
}

impl Default for FetchConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(10),
            max_redirects: MAX_REDIRECTS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fetcher {
    client: Client,
    config: FetchConfig,
}

fn classify(err: &reqwest::Error) -> FailReason {
    if err.is_timeout() {
        return FailReason::Timeout;
    }
    let mut chain = String::new();
    let mut src: Option<&dyn std::error::Error> = Some(err);
    while let Some(e) = src {
        chain.push_str(&e.to_string().to_ascii_lowercase());
        chain.push(' ');
        src = e.source();
    }
    if chain.contains("dns") || chain.contains("lookup address") || chain.contains("name or service") {
        FailReason::Dns
    } else if chain.contains("tls") || chain.contains("ssl") || chain.contains("certificate") {
        FailReason::Tls
    } else if chain.contains("timed out") {
        FailReason::Timeout
    } else {
        FailReason::Connection
    }
}

fn header_str(h: &HeaderMap, name: header::HeaderName) -> Option<String> {
    h.get(name).and_then(|v| v.to_str().ok()).map(str::to_owned)
}

fn charset_of(h: &HeaderMap) -> Option<String> {
    let ct = header_str(h, header::CONTENT_TYPE)?;
    ct.split(';')
        .filter_map(|p| p.trim().split_once('='))
        .find(|(k, _)| k.trim().eq_ignore_ascii_case("charset"))
        .map(|(_, v)| v.trim().trim_matches('"').to_owned())
}

impl Fetcher {
    pub fn new(config: FetchConfig) -> Self {
        let client = Client::builder()
            .redirect(reqwest::redirect::Policy::none())
            .user_agent(USER_AGENT)
            .timeout(config.timeout)
            .build()
            .expect("http client");
        Self { client, config }
    }

    pub fn config(&self) -> &FetchConfig {
        &self.config
    }

    /// Fetches `url` for a channel. Social channels go through the same
    /// path with the channel named in a request header.
    pub async fn fetch_for(
        &self,
        channel: ChannelKind,
        url: &Url,
        etag: Option<&str>,
        last_modified: Option<&str>,
    ) -> FetchResult {
        let mut extra = HeaderMap::new();
        if matches!(channel, ChannelKind::Facebook | ChannelKind::Twitter) {
            extra.insert(CHANNEL_HEADER, HeaderValue::from_static(channel.as_str()));
        }
        self.fetch_with(url, etag, last_modified, extra).await
    }

    pub async fn fetch_conditional(
        &self,
        url: &Url,
        etag: Option<&str>,
        last_modified: Option<&str>,
    ) -> FetchResult {
        self.fetch_with(url, etag, last_modified, HeaderMap::new()).await
    }

    async fn fetch_with(
        &self,
        url: &Url,
        etag: Option<&str>,
        last_modified: Option<&str>,
        extra: HeaderMap,
    ) -> FetchResult {
        let mut progress = FetchResult {
            outcome: FetchOutcome::Failed(FailReason::Timeout),
            status: None,
            final_url: url.clone(),
            hops: 0,
            permanent_url: None,
        };
        let run = self.follow(url, etag, last_modified, extra, &mut progress);
        match tokio::time::timeout(self.config.timeout, run).await {
            Ok(outcome) => progress.outcome = outcome,
            Err(_) => progress.outcome = FetchOutcome::Failed(FailReason::Timeout),
        }
        progress
    }

    async fn follow(
        &self,
        url: &Url,
        etag: Option<&str>,
        last_modified: Option<&str>,
        extra: HeaderMap,
        progress: &mut FetchResult,
    ) -> FetchOutcome {
        let mut headers = extra;
        if let Some(v) = etag.and_then(|e| HeaderValue::from_str(e).ok()) {
            headers.insert(header::IF_NONE_MATCH, v);
        }
        if let Some(v) = last_modified.and_then(|e| HeaderValue::from_str(e).ok()) {
            headers.insert(header::IF_MODIFIED_SINCE, v);
        }
        let mut current = url.clone();
        let mut still_permanent = true;
        loop {
            let resp = match self.client.get(current.clone()).headers(headers.clone()).send().await {
                Ok(r) => r,
                Err(e) => return FetchOutcome::Failed(classify(&e)),
            };
            let status = resp.status();
            progress.status = Some(status.as_u16());
            if status.is_redirection() && status != StatusCode::NOT_MODIFIED {
                if progress.hops >= self.config.max_redirects {
                    return FetchOutcome::Failed(FailReason::TooManyRedirects);
                }
                let Some(next) = header_str(resp.headers(), header::LOCATION)
                    .and_then(|loc| current.join(&loc).ok())
                else {
                    return FetchOutcome::Failed(FailReason::BadRedirect);
                };
                let permanent = matches!(
                    status,
                    StatusCode::MOVED_PERMANENTLY | StatusCode::PERMANENT_REDIRECT
                );
                still_permanent &= permanent;
                if still_permanent {
                    progress.permanent_url = Some(next.clone());
                }
                progress.hops += 1;
                current = next;
                progress.final_url = current.clone();
                continue;
            }
            if status == StatusCode::NOT_MODIFIED {
                return FetchOutcome::NotModified;
            }
            if status.is_client_error() {
                return FetchOutcome::Failed(FailReason::Http4xx);
            }
            if status.is_server_error() {
                return FetchOutcome::Failed(FailReason::Http5xx);
            }
            let headers = resp.headers().clone();
            return match resp.bytes().await {
                Ok(body) => FetchOutcome::Modified {
                    body: body.to_vec(),
                    charset: charset_of(&headers),
                    etag: header_str(&headers, header::ETAG),
                    last_modified: header_str(&headers, header::LAST_MODIFIED),
                },
                Err(e) => FetchOutcome::Failed(classify(&e)),
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charset_from_content_type() {
        let mut h = HeaderMap::new();
        h.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/rss+xml; charset=\"ISO-8859-1\""));
        assert_eq!(charset_of(&h).as_deref(), Some("ISO-8859-1"));
        h.insert(header::CONTENT_TYPE, HeaderValue::from_static("text/xml"));
        assert_eq!(charset_of(&h), None);
    }

    #[test]
    fn user_agent_carries_version() {
        assert_eq!(USER_AGENT, format!("feedmix/{}", env!("CARGO_PKG_VERSION")));
    }

    #[tokio::test]
    async fn refused_connection_fails_fast() {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let port = l.local_addr().unwrap().port();
        drop(l);
        let f = Fetcher::new(FetchConfig::default());
        let url = Url::parse(&format!("http://127.0.0.1:{port}/feed")).unwrap();
        let r = f.fetch_conditional(&url, None, None).await;
        assert_eq!(r.failure(), Some(FailReason::Connection));
    }

    #[tokio::test]
    async fn unresolvable_host_is_dns() {
        let f = Fetcher::new(FetchConfig {
            timeout: Duration::from_secs(5),
            ..Default::default()
        });
        let url = Url::parse("http://nonexistent.invalid/feed").unwrap();
        let r = f.fetch_conditional(&url, None, None).await;
        assert!(matches!(r.failure(), Some(FailReason::Dns | FailReason::Timeout)), "{r:?}");
    }
}
