//! Channel processors: conditional fetch, parse, dedup, mark, complete.

pub mod fetch;
pub mod parse;
pub mod process;

pub use fetch::{FailReason, FetchConfig, FetchOutcome, FetchResult, Fetcher, USER_AGENT};
pub use parse::{parse_feed, FeedFormat, ParseError, ParsedFeed, RawItem};
pub use process::{FaultAction, FaultInjector, ProcessFailure, ProcessOutcome, Worker, WorkerStats};
