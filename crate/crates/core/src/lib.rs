//! Multi-source feed ingestion.
//!
//! Streams (registered feed sources) are picked from the [`store`] when
//! due, fanned out into per-channel messages on a [`queue::DualQueue`],
//! pulled by the [`dispatch`] router into bounded worker-pool mailboxes,
//! and fetched, parsed and deduplicated by [`worker`]s. The [`monitor`]
//! captures dead letters and bucketed throughput counters. [`feedsim`] is a
//! deterministic feed server used by the examples and tests.

pub mod clock;
pub mod model;
pub mod monitor;
pub mod queue;
pub mod store;
pub mod scheduler;
pub mod dispatch;
pub mod worker;
pub mod feedsim;
pub mod pipeline;
pub mod app;
