//! Command line entry point.
//!
//! Exit codes: 0 success, 1 request rejected or runtime failure, 2 bad
//! usage or configuration, 3 admin port busy, 4 service unreachable.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

use super::api::{ApiError, MetricsSnapshot, Prioritized};
use super::config::AppConfig;
use super::plot::render_svg;
use super::service;
use crate::clock::SystemClock;
use crate::model::{ChannelKind, FeedStream};
use crate::monitor::to_csv;
use crate::store::Store;

pub const EXIT_REJECTED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_PORT_BUSY: u8 = 3;
pub const EXIT_UNREACHABLE: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "feedmix", version, about = "Scheduled feed ingestion service")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the service until SIGINT/SIGTERM.
    Run {
        /// Config file; falls back to $FEEDMIX_CONFIG, then defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Manage streams through the admin API.
    Stream {
        #[command(subcommand)]
        action: StreamCommand,
    },
    /// Print or export per-bucket counters as CSV.
    Stats {
        /// Number of closed buckets.
        #[arg(long, default_value_t = 12)]
        window: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        server: Server,
    },
    /// Draw sent, deleted and dead-lettered counts as an SVG line chart.
    Plot {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        window: usize,
        #[command(flatten)]
        server: Server,
    },
    /// Compact the store index and journal. Run it while the service is stopped.
    Compact {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Store directory; overrides `store_root` from the config.
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum StreamCommand {
    Add {
        #[arg(long)]
        url: String,
        /// Comma separated: news, custom_rss, facebook, twitter.
        #[arg(long = "channel", value_delimiter = ',', required = true)]
        channels: Vec<ChannelKind>,
        #[arg(long)]
        id: Option<String>,
        /// Poll interval in seconds.
        #[arg(long)]
        interval: Option<u64>,
        #[command(flatten)]
        server: Server,
    },
    Rm {
        id: String,
        #[command(flatten)]
        server: Server,
    },
    Prioritize {
        id: String,
        #[command(flatten)]
        server: Server,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Server {
    /// Admin API base URL.
    #[arg(long, env = "FEEDMIX_SERVER", default_value = "http://127.0.0.1:8080")]
    pub server: String,
}

#[derive(Debug)]
enum Failure {
    Unreachable(String),
    Rejected(String),
    Usage(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Unreachable(_) => EXIT_UNREACHABLE,
            Failure::Rejected(_) => EXIT_REJECTED,
            Failure::Usage(_) => EXIT_USAGE,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Unreachable(m) | Failure::Rejected(m) | Failure::Usage(m) => f.write_str(m),
        }
    }
}

/// Parses `std::env::args` and runs the command.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    ExitCode::from(execute(cli))
}

/// Runs a parsed command and returns its exit code.
pub fn execute(cli: Cli) -> u8 {
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return EXIT_REJECTED;
        }
    };
    match cli.command {
        Command::Run { config } => {
            let config = match AppConfig::load(config.as_deref()) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_USAGE;
                }
            };
            service::init_logging(&config.log_level);
            match runtime.block_on(service::run(config)) {
                Ok(()) => 0,
                Err(e) => {
                    eprintln!("error: {e}");
                    tracing::error!(error = %e, "service failed");
                    e.exit_code()
                }
            }
        }
        Command::Compact { config, store } => compact(config, store),
        other => match runtime.block_on(client_command(other)) {
            Ok(()) => 0,
            Err(f) => {
                eprintln!("error: {f}");
                f.code()
            }
        },
    }
}

fn compact(config: Option<PathBuf>, store: Option<PathBuf>) -> u8 {
    let root = match store {
        Some(root) => root,
        None => match AppConfig::load(config.as_deref()) {
            Ok(c) => c.store_root,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_USAGE;
            }
        },
    };
    let report = Store::open(&root, Arc::new(SystemClock)).and_then(|s| s.compact());
    match report {
        Ok(r) => {
            println!(
                "index entries {} (dropped {} stale lines), journal bytes reclaimed {}",
                r.index_entries, r.index_lines_dropped, r.journal_bytes_reclaimed
            );
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_REJECTED
        }
    }
}

struct Client {
    http: reqwest::Client,
    base: String,
}

impl Client {
    fn new(server: &Server) -> Result<Self, Failure> {
        let base = server.server.trim_end_matches('/').to_owned();
        url::Url::parse(&base).map_err(|e| Failure::Usage(format!("bad --server `{base}`: {e}")))?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| Failure::Rejected(e.to_string()))?;
        Ok(Self { http, base })
    }

    async fn send(&self, req: reqwest::RequestBuilder) -> Result<reqwest::Response, Failure> {
        let resp = req.send().await.map_err(|e| {
            if e.is_connect() || e.is_timeout() {
                Failure::Unreachable(format!("cannot reach {}: {e}", self.base))
            } else {
                Failure::Rejected(e.to_string())
            }
        })?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let detail = match resp.json::<ApiError>().await {
            Ok(ApiError { error, field: Some(f) }) => format!("{error} ({f})"),
            Ok(ApiError { error, field: None }) => error,
            Err(_) => String::new(),
        };
        Err(Failure::Rejected(format!("{status} {detail}").trim_end().to_owned()))
    }

    async fn json<T: DeserializeOwned>(&self, req: reqwest::RequestBuilder) -> Result<T, Failure> {
        self.send(req)
            .await?
            .json()
            .await
            .map_err(|e| Failure::Rejected(format!("unexpected response: {e}")))
    }

    async fn metrics(&self, window: usize) -> Result<MetricsSnapshot, Failure> {
        self.json(self.http.get(format!("{}/metrics?window={window}", self.base))).await
    }
}

async fn client_command(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Stream { action } => match action {
            StreamCommand::Add {
                url,
                channels,
                id,
                interval,
                server,
            } => {
                let c = Client::new(&server)?;
                let body = json!({ "id": id, "url": url, "channels": channels, "poll_interval": interval });
                let s: FeedStream = c.json(c.http.post(format!("{}/streams", c.base)).json(&body)).await?;
                println!("{}", serde_json::to_string_pretty(&s).unwrap_or_default());
            }
            StreamCommand::Rm { id, server } => {
                let c = Client::new(&server)?;
                c.send(c.http.delete(format!("{}/streams/{id}", c.base))).await?;
                println!("removed {id}");
            }
            StreamCommand::Prioritize { id, server } => {
                let c = Client::new(&server)?;
                let p: Prioritized = c.json(c.http.post(format!("{}/streams/{id}/prioritize", c.base))).await?;
                println!("prioritized {} ({} messages)", p.stream_id, p.messages);
            }
        },
        Command::Stats { window, csv, server } => {
            let c = Client::new(&server)?;
            let m = c.metrics(window).await?;
            let text = to_csv(&m.buckets);
            match csv {
                Some(path) => {
                    std::fs::write(&path, text)
                        .map_err(|e| Failure::Rejected(format!("cannot write {}: {e}", path.display())))?;
                    println!("wrote {} buckets to {}", m.buckets.len(), path.display());
                }
                None => print!("{text}"),
            }
        }
        Command::Plot { out, window, server } => {
            let c = Client::new(&server)?;
            let m = c.metrics(window).await?;
            std::fs::write(&out, render_svg(&m.buckets))
                .map_err(|e| Failure::Rejected(format!("cannot write {}: {e}", out.display())))?;
            println!("wrote {}", out.display());
        }
        Command::Run { .. } | Command::Compact { .. } => unreachable!("handled locally"),
    }
    Ok(())
}
