//! The long-running service: store, pipeline and admin listener.

use std::net::SocketAddr;
use std::sync::Arc;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use super::api::{self, AdminState};
use super::config::AppConfig;
use crate::clock::{Clock, SystemClock};
use crate::model::StreamStatus;
use crate::pipeline::{Pipeline, PipelineHooks};
use crate::store::{Store, StoreError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot open store: {0}")]
    Store(#[from] StoreError),
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("admin server failed: {0}")]
    Serve(std::io::Error),
}

impl ServiceError {
    pub fn exit_code(&self) -> u8 {
        match self {
            ServiceError::Bind { .. } => 3,
            _ => 1,
        }
    }
}

pub struct Service {
    config: AppConfig,
    pipeline: Pipeline,
    admin_addr: SocketAddr,
    stop_admin: watch::Sender<bool>,
    server: JoinHandle<std::io::Result<()>>,
}

impl Service {
    /// Opens the store, returns every `InProcess` stream to `Idle` (nothing
    /// can be in flight in a fresh process) and starts all loops.
    pub async fn start(config: AppConfig, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        let listener = TcpListener::bind(config.admin_listen)
            .await
            .map_err(|source| ServiceError::Bind {
                addr: config.admin_listen,
                source,
            })?;
        let admin_addr = listener.local_addr().map_err(ServiceError::Serve)?;
        let store = Store::open_with(&config.store_root, clock.clone(), config.store)?;
        let recovered = recover_in_process(&store)?;
        if recovered > 0 {
            tracing::info!(recovered, "released streams left in process by a previous run");
        }

        let pipeline = Pipeline::start(config.pipeline.clone(), store, clock, PipelineHooks::default());
        let app = api::router(AdminState::of(&pipeline));
        let (stop_admin, mut rx) = watch::channel(false);
        let server = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async move {
                    let _ = rx.wait_for(|stop| *stop).await;
                })
                .await
        });
        tracing::info!(%admin_addr, store_root = %config.store_root.display(), "feedmix started");
        Ok(Self {
            config,
            pipeline,
            admin_addr,
            stop_admin,
            server,
        })
    }

    pub fn admin_addr(&self) -> SocketAddr {
        self.admin_addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.admin_addr)
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    /// Stops the admin listener, then drains the pipeline for at most twice
    /// the fetch timeout. Returns false if work had to be abandoned.
    pub async fn stop(self) -> bool {
        let _ = self.stop_admin.send(true);
        match self.server.await {
            Ok(Err(e)) => tracing::warn!(error = %e, "admin server ended with an error"),
            Err(e) => tracing::warn!(error = %e, "admin server task failed"),
            Ok(Ok(())) => {}
        }
        let clean = self.pipeline.stop(self.config.drain_bound()).await;
        tracing::info!(clean, "feedmix stopped");
        clean
    }
}

fn recover_in_process(store: &Store) -> Result<usize, StoreError> {
    let mut n = 0;
    for s in store.list_streams() {
        if s.status != StreamStatus::InProcess {
            continue;
        }
        if let Some(at) = s.picked_at {
            if store.release(&s.id, at)? {
                n += 1;
            }
        }
    }
    Ok(n)
}

pub fn init_logging(level: &str) {
    let filter = tracing_subscriber::EnvFilter::try_new(level).unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Runs until SIGINT or SIGTERM.
pub async fn run(config: AppConfig) -> Result<(), ServiceError> {
    let service = Service::start(config, Arc::new(SystemClock)).await?;
    shutdown_signal().await;
    tracing::info!("shutdown requested, draining");
    service.stop().await;
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
