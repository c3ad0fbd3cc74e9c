//! Admin HTTP API.
//!
//! | method | path | success |
//! |---|---|---|
//! | POST | `/streams` | 201 + normalized stream |
//! | GET | `/streams/{id}` | 200 + stream |
//! | DELETE | `/streams/{id}` | 204 |
//! | POST | `/streams/{id}/prioritize` | 202 + `{stream_id, messages}` |
//! | GET | `/metrics?window=N` | 200 + [`MetricsSnapshot`] |
//! | GET | `/healthz` | 200 `ok` |
//!
//! Errors are `{"error": kind, "field": name?}` with 400 (validation),
//! 404 (unknown id), 409 (duplicate id, or prioritizing a stream that is
//! already in process) or 503 (queue full).

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::dispatch::Dispatcher;
use crate::model::{validate_stream, ChannelKind, StreamDraft};
use crate::monitor::{MetricsBucket, Monitor, Totals};
use crate::pipeline::Pipeline;
use crate::queue::{DualQueue, QueueError, QueueStats};
use crate::scheduler::{Scheduler, SchedulerError};
use crate::store::{Store, StoreError};

/// Closed buckets returned when `/metrics` has no `window` parameter.
pub const DEFAULT_METRICS_WINDOW: usize = 12;

#[derive(Clone)]
pub struct AdminState {
    pub store: Store,
    pub scheduler: Arc<Scheduler>,
    pub queue: Arc<DualQueue>,
    pub monitor: Arc<Monitor>,
    pub dispatcher: Arc<Dispatcher>,
    pub clock: Arc<dyn Clock>,
}

impl AdminState {
    pub fn of(p: &Pipeline) -> Self {
        Self {
            store: p.store().clone(),
            scheduler: p.scheduler().clone(),
            queue: p.queue().clone(),
            monitor: p.monitor().clone(),
            dispatcher: p.dispatcher().clone(),
            clock: p.clock().clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prioritized {
    pub stream_id: String,
    pub messages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    /// Most recent closed buckets, oldest first.
    pub buckets: Vec<MetricsBucket>,
    /// The bucket still collecting.
    pub open: MetricsBucket,
    pub totals: Totals,
    pub queue: QueueStats,
    pub pool_sizes: BTreeMap<ChannelKind, usize>,
    pub alerts: usize,
    pub streams: usize,
    pub items: usize,
}

#[derive(Debug, Deserialize)]
struct WindowQuery {
    window: Option<usize>,
}

pub fn router(state: AdminState) -> Router {
    Router::new()
        .route("/streams", post(create_stream))
        .route("/streams/{id}", get(get_stream).delete(delete_stream))
        .route("/streams/{id}/prioritize", post(prioritize))
        .route("/metrics", get(metrics))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(state)
}

fn error(status: StatusCode, kind: &str, field: Option<&str>) -> Response {
    let body = ApiError {
        error: kind.to_owned(),
        field: field.map(str::to_owned),
    };
    (status, Json(body)).into_response()
}

fn store_error(e: StoreError) -> Response {
    match e {
        StoreError::UnknownStream(_) => error(StatusCode::NOT_FOUND, "UnknownStream", None),
        StoreError::DuplicateStream(_) => error(StatusCode::CONFLICT, "DuplicateStream", Some("id")),
        StoreError::IllegalTransition { .. } => error(StatusCode::CONFLICT, "InProcess", None),
        other => {
            tracing::error!(error = %other, "store failure in admin api");
            error(StatusCode::INTERNAL_SERVER_ERROR, "StoreError", None)
        }
    }
}

async fn create_stream(State(s): State<AdminState>, body: Bytes) -> Response {
    let draft: StreamDraft = match serde_json::from_slice(&body) {
        Ok(d) => d,
        Err(e) => {
            tracing::debug!(error = %e, "unparseable stream body");
            return error(StatusCode::BAD_REQUEST, "BadJson", None);
        }
    };
    let stream = match validate_stream(draft, s.clock.now()) {
        Ok(stream) => stream,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.kind(), Some(e.field())),
    };
    match s.store.create_stream(stream) {
        Ok(created) => (StatusCode::CREATED, Json(created)).into_response(),
        Err(e) => store_error(e),
    }
}

async fn get_stream(State(s): State<AdminState>, Path(id): Path<String>) -> Response {
    match s.store.get_stream(&id) {
        Ok(stream) => Json(stream).into_response(),
        Err(e) => store_error(e),
    }
}

async fn delete_stream(State(s): State<AdminState>, Path(id): Path<String>) -> Response {
    match s.store.delete_stream(&id) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => store_error(e),
    }
}

async fn prioritize(State(s): State<AdminState>, Path(id): Path<String>) -> Response {
    match s.scheduler.prioritize(&id, s.clock.now()) {
        Ok(messages) => (StatusCode::ACCEPTED, Json(Prioritized { stream_id: id, messages })).into_response(),
        Err(SchedulerError::Store(e)) => store_error(e),
        Err(SchedulerError::Queue(QueueError::QueueFull { .. })) => {
            error(StatusCode::SERVICE_UNAVAILABLE, "QueueFull", None)
        }
        Err(SchedulerError::Queue(e)) => {
            tracing::error!(error = %e, "queue failure in admin api");
            error(StatusCode::INTERNAL_SERVER_ERROR, "QueueError", None)
        }
    }
}

async fn metrics(State(s): State<AdminState>, Query(q): Query<WindowQuery>) -> Json<MetricsSnapshot> {
    let mut buckets = s.monitor.snapshot(q.window.unwrap_or(DEFAULT_METRICS_WINDOW));
    let open = buckets.pop().expect("snapshot always has the open bucket");
    Json(MetricsSnapshot {
        buckets,
        open,
        totals: s.monitor.totals(),
        queue: s.queue.stats(),
        pool_sizes: s.dispatcher.pool_sizes(),
        alerts: s.monitor.alerts().len(),
        streams: s.store.stream_count(),
        items: s.store.item_count(),
    })
}
