//! Domain types shared by every stage of the pipeline, plus the pure
//! scheduling and fingerprinting functions.

use std::collections::BTreeSet;
use std::fmt;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use url::Url;

use crate::clock::delta;

pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_secs(300);

const MAX_ID_LEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChannelKind {
    News,
    CustomRss,
    Facebook,
    Twitter,
}

impl ChannelKind {
    pub const ALL: [ChannelKind; 4] = [
        ChannelKind::News,
        ChannelKind::CustomRss,
        ChannelKind::Facebook,
        ChannelKind::Twitter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelKind::News => "news",
            ChannelKind::CustomRss => "custom_rss",
            ChannelKind::Facebook => "facebook",
            ChannelKind::Twitter => "twitter",
        }
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ChannelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "news" => Ok(ChannelKind::News),
            "custom_rss" | "customrss" | "rss" => Ok(ChannelKind::CustomRss),
            "facebook" => Ok(ChannelKind::Facebook),
            "twitter" => Ok(ChannelKind::Twitter),
            other => Err(format!("unknown channel `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamStatus {
    Idle,
    InProcess,
    Processed,
    Failed,
}

impl StreamStatus {
    /// Whether moving from `self` to `to` is a legal lifecycle step.
    ///
    /// `InProcess -> Idle` is the release used when a picked stream could
    /// not be enqueued; it puts the stream back in line for the next pick.
    pub fn can_transition(self, to: StreamStatus) -> bool {
        use StreamStatus::*;
        matches!(
            (self, to),
            (Idle, InProcess)
                | (InProcess, Processed)
                | (InProcess, Failed)
                | (Processed, InProcess)
                | (Failed, InProcess)
                | (InProcess, InProcess)
                | (InProcess, Idle)
        )
    }
}

/// A registered feed source and its polling state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedStream {
    pub id: String,
    pub url: Url,
    pub channels: BTreeSet<ChannelKind>,
    #[serde(with = "secs")]
    pub poll_interval: Duration,
    pub next_due: DateTime<Utc>,
    pub status: StreamStatus,
    pub picked_at: Option<DateTime<Utc>>,
    pub etag: Option<String>,
    pub last_modified: Option<String>,
    pub consecutive_failures: u32,
    pub created_at: DateTime<Utc>,
}

/// Which sub-queue a message travels through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageClass {
    Main,
    Priority,
}

/// One unit of work: poll `stream_id` on behalf of `channel`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueMessage {
    pub message_id: String,
    pub stream_id: String,
    pub channel: ChannelKind,
    pub priority: MessageClass,
    pub enqueued_at: DateTime<Utc>,
    pub receive_count: u32,
}

impl QueueMessage {
    pub fn new(
        stream_id: impl Into<String>,
        channel: ChannelKind,
        priority: MessageClass,
        enqueued_at: DateTime<Utc>,
    ) -> Self {
        Self {
            message_id: uuid::Uuid::new_v4().to_string(),
            stream_id: stream_id.into(),
            channel,
            priority,
            enqueued_at,
            receive_count: 0,
        }
    }
}

/// A parsed feed entry ready for storage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedItem {
    pub stream_id: String,
    pub guid: Option<String>,
    pub link: String,
    pub title: String,
    pub published: Option<DateTime<Utc>>,
    pub fingerprint: String,
    pub ingested_at: DateTime<Utc>,
}

impl FeedItem {
    pub fn new(
        stream_id: impl Into<String>,
        guid: Option<String>,
        link: impl Into<String>,
        title: impl Into<String>,
        published: Option<DateTime<Utc>>,
        ingested_at: DateTime<Utc>,
    ) -> Result<Self, ModelError> {
        let stream_id = stream_id.into();
        let link = link.into();
        let guid = guid.filter(|g| !g.is_empty());
        let fingerprint = item_fingerprint(&stream_id, guid.as_deref(), &link)?;
        Ok(Self {
            stream_id,
            guid,
            link,
            title: title.into(),
            published,
            fingerprint,
            ingested_at,
        })
    }

    pub fn fingerprint_is_consistent(&self) -> bool {
        item_fingerprint(&self.stream_id, self.guid.as_deref(), &self.link)
            .is_ok_and(|fp| fp == self.fingerprint)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("item has neither guid nor link")]
    InvalidItem,
}

pub fn compute_next_due(completed_at: DateTime<Utc>, poll_interval: Duration) -> DateTime<Utc> {
    completed_at + delta(poll_interval)
}

/// Dedup key for an item: hex SHA-256 of `stream_id|guid`, or
/// `stream_id|link` when the item carries no guid.
pub fn item_fingerprint(
    stream_id: &str,
    guid: Option<&str>,
    link: &str,
) -> Result<String, ModelError> {
    let key = match guid {
        Some(g) if !g.is_empty() => g,
        _ if !link.is_empty() => link,
        _ => return Err(ModelError::InvalidItem),
    };
    let mut hasher = Sha256::new();
    hasher.update(stream_id.as_bytes());
    hasher.update(b"|");
    hasher.update(key.as_bytes());
    Ok(hex::encode(hasher.finalize()))
}

/// Loosely-typed stream record as submitted by clients. Every field except
/// `url` and `channels` has a default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamDraft {
    pub id: Option<String>,
    pub url: String,
    pub channels: Vec<ChannelKind>,
    pub poll_interval: Option<u64>,
    pub next_due: Option<DateTime<Utc>>,
    pub status: Option<StreamStatus>,
    pub picked_at: Option<DateTime<Utc>>,
    pub etag: Option<String>,
    pub last_modified: Option<String>,
    pub consecutive_failures: Option<u32>,
    pub created_at: Option<DateTime<Utc>>,
}

impl From<FeedStream> for StreamDraft {
    fn from(s: FeedStream) -> Self {
        Self {
            id: Some(s.id),
            url: s.url.into(),
            channels: s.channels.into_iter().collect(),
            poll_interval: Some(s.poll_interval.as_secs()),
            next_due: Some(s.next_due),
            status: Some(s.status),
            picked_at: s.picked_at,
            etag: s.etag,
            last_modified: s.last_modified,
            consecutive_failures: Some(s.consecutive_failures),
            created_at: Some(s.created_at),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("invalid url `{0}`: must be an absolute http(s) URL")]
    InvalidUrl(String),
    #[error("stream must list at least one channel")]
    NoChannels,
    #[error("poll interval must be at least 1 second")]
    BadInterval,
    #[error("invalid stream id `{0}`")]
    InvalidId(String),
    #[error("status InProcess requires picked_at")]
    MissingPickedAt,
}

impl ValidationError {
    pub fn field(&self) -> &'static str {
        match self {
            ValidationError::InvalidUrl(_) => "url",
            ValidationError::NoChannels => "channels",
            ValidationError::BadInterval => "poll_interval",
            ValidationError::InvalidId(_) => "id",
            ValidationError::MissingPickedAt => "picked_at",
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ValidationError::InvalidUrl(_) => "InvalidUrl",
            ValidationError::NoChannels => "NoChannels",
            ValidationError::BadInterval => "BadInterval",
            ValidationError::InvalidId(_) => "InvalidId",
            ValidationError::MissingPickedAt => "MissingPickedAt",
        }
    }
}

/// Ids become file names in the store, so they are restricted to a
/// filesystem-safe alphabet.
pub fn is_valid_stream_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= MAX_ID_LEN
        && !id.starts_with('.')
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
}

pub fn validate_stream(draft: StreamDraft, now: DateTime<Utc>) -> Result<FeedStream, ValidationError> {
    let url = Url::parse(draft.url.trim())
        .ok()
        .filter(|u| matches!(u.scheme(), "http" | "https") && u.host().is_some())
        .ok_or_else(|| ValidationError::InvalidUrl(draft.url.clone()))?;

    let channels: BTreeSet<ChannelKind> = draft.channels.into_iter().collect();
    if channels.is_empty() {
        return Err(ValidationError::NoChannels);
    }

    let poll_interval = match draft.poll_interval {
        Some(0) => return Err(ValidationError::BadInterval),
        Some(secs) => Duration::from_secs(secs),
        None => DEFAULT_POLL_INTERVAL,
    };

    let id = match draft.id {
        Some(id) if is_valid_stream_id(&id) => id,
        Some(id) => return Err(ValidationError::InvalidId(id)),
        None => uuid::Uuid::new_v4().to_string(),
    };

    let status = draft.status.unwrap_or(StreamStatus::Idle);
    if status == StreamStatus::InProcess && draft.picked_at.is_none() {
        return Err(ValidationError::MissingPickedAt);
    }

    Ok(FeedStream {
        id,
        url,
        channels,
        poll_interval,
        next_due: draft.next_due.unwrap_or(now),
        status,
        picked_at: draft.picked_at,
        etag: draft.etag,
        last_modified: draft.last_modified,
        consecutive_failures: draft.consecutive_failures.unwrap_or(0),
        created_at: draft.created_at.unwrap_or(now),
    })
}

pub(crate) mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_secs())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_secs)
    }
}
