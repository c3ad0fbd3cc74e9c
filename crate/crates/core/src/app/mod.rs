//! Service binary surface: config file, admin API, CLI and chart output.

pub mod api;
pub mod cli;
pub mod config;
pub mod plot;
pub mod service;

pub use api::{router, AdminState, ApiError, MetricsSnapshot, Prioritized};
pub use config::{AppConfig, ConfigError, CONFIG_ENV};
pub use plot::render_svg;
pub use service::{Service, ServiceError};
