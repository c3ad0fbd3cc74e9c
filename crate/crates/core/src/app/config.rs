//! Service configuration.
//!
//! The file is TOML with one flat namespace of module-prefixed keys:
//!
//! ```toml
//! store_root = "/var/lib/feedmix"
//! admin_listen = "127.0.0.1:8080"
//! scheduler.tick_interval_s = 5
//! dispatch.mailbox_capacity = 256
//! ```
//!
//! Nested tables (`[scheduler]`) are accepted too. Every key must be one of
//! [`KEYS`]; anything else is rejected.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;
use url::Url;

use crate::pipeline::PipelineConfig;
use crate::store::StoreOptions;

/// Environment variable consulted when no `--config` path is given.
pub const CONFIG_ENV: &str = "FEEDMIX_CONFIG";

pub const KEYS: &[&str] = &[
    "store_root",
    "admin_listen",
    "log_level",
    "store.fsync",
    "scheduler.tick_interval_s",
    "scheduler.pick_horizon_s",
    "scheduler.pick_limit",
    "scheduler.stale_after_s",
    "queue.visibility_timeout_s",
    "queue.capacity",
    "dispatch.target_buffer",
    "dispatch.processed_trigger",
    "dispatch.timeout_trigger_s",
    "dispatch.batch_max",
    "dispatch.mailbox_capacity",
    "dispatch.pool_min",
    "dispatch.pool_max",
    "dispatch.initial_pool_size",
    "dispatch.explore_probability",
    "dispatch.history_len",
    "dispatch.resize_epoch_s",
    "dispatch.resize_enabled",
    "dispatch.rng_seed",
    "worker.fetch_timeout_s",
    "worker.max_redirects",
    "monitor.window_s",
    "monitor.alert_threshold",
    "monitor.ring_capacity",
    "monitor.retain_buckets",
    "monitor.alert_webhook_url",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct AppConfig {
    pub store_root: PathBuf,
    pub store: StoreOptions,
    pub admin_listen: SocketAddr,
    pub log_level: String,
    pub pipeline: PipelineConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            store_root: PathBuf::from("feedmix-data"),
            store: StoreOptions::default(),
            admin_listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            log_level: "info".into(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl AppConfig {
    /// Reads `path`, or the file named by `FEEDMIX_CONFIG`, or falls back to
    /// defaults when neither is set.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let path = match path {
            Some(p) => Some(p.to_owned()),
            None => std::env::var_os(CONFIG_ENV).map(PathBuf::from),
        };
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Read {
            path: path.clone(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        let mut config = Self::default();
        for (key, value) in &flat {
            config.apply(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.pipeline;
        p.dispatch.validate().map_err(ConfigError::Invalid)?;
        if p.scheduler.tick_interval.is_zero() {
            return Err(ConfigError::Invalid("scheduler.tick_interval_s must be positive".into()));
        }
        if p.queue.capacity == 0 || p.queue.visibility_timeout.is_zero() {
            return Err(ConfigError::Invalid("queue capacity and visibility timeout must be positive".into()));
        }
        if p.monitor.window.as_secs() < 1 {
            return Err(ConfigError::Invalid("monitor.window_s must be at least 1".into()));
        }
        if p.fetch.timeout.is_zero() {
            return Err(ConfigError::Invalid("worker.fetch_timeout_s must be positive".into()));
        }
        Ok(())
    }

    /// Bound on the shutdown drain.
    pub fn drain_bound(&self) -> Duration {
        self.pipeline.fetch.timeout * 2
    }

    fn apply(&mut self, key: &str, v: &toml::Value) -> Result<(), ConfigError> {
        let p = &mut self.pipeline;
        match key {
            "store_root" => self.store_root = PathBuf::from(string(key, v)?),
            "admin_listen" => {
                self.admin_listen = string(key, v)?.parse().map_err(|e| bad(key, e))?;
            }
            "log_level" => self.log_level = string(key, v)?,
            "store.fsync" => self.store.fsync = boolean(key, v)?,
            "scheduler.tick_interval_s" => p.scheduler.tick_interval = seconds(key, v)?,
            "scheduler.pick_horizon_s" => p.scheduler.pick_horizon = seconds(key, v)?,
            "scheduler.pick_limit" => p.scheduler.pick_limit = count(key, v)?,
            "scheduler.stale_after_s" => p.scheduler.stale_after = seconds(key, v)?,
            "queue.visibility_timeout_s" => p.queue.visibility_timeout = seconds(key, v)?,
            "queue.capacity" => p.queue.capacity = count(key, v)?,
            "dispatch.target_buffer" => p.dispatch.policy.target_buffer = count(key, v)?,
            "dispatch.processed_trigger" => p.dispatch.policy.processed_trigger = count(key, v)?,
            "dispatch.timeout_trigger_s" => p.dispatch.policy.timeout_trigger = seconds(key, v)?,
            "dispatch.batch_max" => p.dispatch.policy.batch_max = count(key, v)?,
            "dispatch.mailbox_capacity" => p.dispatch.mailbox_capacity = count(key, v)?,
            "dispatch.pool_min" => p.dispatch.resizer.min_size = count(key, v)?,
            "dispatch.pool_max" => p.dispatch.resizer.max_size = count(key, v)?,
            "dispatch.initial_pool_size" => p.dispatch.initial_pool_size = count(key, v)?,
            "dispatch.explore_probability" => {
                let f = float(key, v)?;
                if !(0.0..=1.0).contains(&f) {
                    return Err(bad(key, "must be within [0, 1]"));
                }
                p.dispatch.resizer.explore_probability = f;
            }
            "dispatch.history_len" => p.dispatch.resizer.history_len = count(key, v)?,
            "dispatch.resize_epoch_s" => p.dispatch.resize_epoch = seconds(key, v)?,
            "dispatch.resize_enabled" => p.dispatch.resize_enabled = boolean(key, v)?,
            "dispatch.rng_seed" => p.dispatch.resizer.rng_seed = count(key, v)? as u64,
            "worker.fetch_timeout_s" => p.fetch.timeout = seconds(key, v)?,
            "worker.max_redirects" => p.fetch.max_redirects = count(key, v)? as u32,
            "monitor.window_s" => p.monitor.window = seconds(key, v)?,
            "monitor.alert_threshold" => p.monitor.alert_threshold = count(key, v)? as u64,
            "monitor.ring_capacity" => p.monitor.ring_capacity = count(key, v)?,
            "monitor.retain_buckets" => p.monitor.retain_buckets = count(key, v)?,
            "monitor.alert_webhook_url" => {
                let s = string(key, v)?;
                p.monitor.alert_webhook_url = if s.is_empty() {
                    None
                } else {
                    Some(Url::parse(&s).map_err(|e| bad(key, e))?)
                };
            }
            _ => return Err(ConfigError::UnknownKey(key.to_owned())),
        }
        Ok(())
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn bad(key: &str, reason: impl std::fmt::Display) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_owned(),
        reason: reason.to_string(),
    }
}

fn string(key: &str, v: &toml::Value) -> Result<String, ConfigError> {
    v.as_str().map(str::to_owned).ok_or_else(|| bad(key, "expected a string"))
}

fn boolean(key: &str, v: &toml::Value) -> Result<bool, ConfigError> {
    v.as_bool().ok_or_else(|| bad(key, "expected true or false"))
}

fn float(key: &str, v: &toml::Value) -> Result<f64, ConfigError> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(bad(key, "expected a number")),
    }
}

fn count(key: &str, v: &toml::Value) -> Result<usize, ConfigError> {
    let i = v.as_integer().ok_or_else(|| bad(key, "expected an integer"))?;
    usize::try_from(i).map_err(|_| bad(key, "must not be negative"))
}

fn seconds(key: &str, v: &toml::Value) -> Result<Duration, ConfigError> {
    let f = float(key, v)?;
    Duration::try_from_secs_f64(f).map_err(|_| bad(key, "expected a non-negative number of seconds"))
}
