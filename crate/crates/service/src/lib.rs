//! HTTP JSON API over one checkpoint: sessions, edits, inversion and
//! attention heatmaps.
//!
//! Sampler runs execute on a fixed pool of blocking workers. A request that
//! finds every worker busy is answered with 503 rather than queued.

pub mod api;
pub mod engine;
mod routes;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::http::HeaderValue;
use axum::Router;
use tokio::sync::Semaphore;
use tower_http::cors::{Any, CorsLayer};

use atnf_core::checkpoint::Checkpoint;
use atnf_core::{Error, Result};

pub use engine::Engine;
pub use store::SessionStore;

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub addr: SocketAddr,
    pub workers: usize,
    pub persist: Option<PathBuf>,
    pub timeout: Duration,
    /// Allowed browser origin; any origin when `None`.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            addr: SocketAddr::from(([127, 0, 0, 1], 8080)),
            workers: std::thread::available_parallelism().map_or(2, |n| n.get()),
            persist: None,
            timeout: Duration::from_secs(60),
            cors_origin: None,
        }
    }
}

impl ServiceConfig {
    /// Defaults overridden by `ATNF_ADDR`, `ATNF_WORKERS`,
    /// `ATNF_TIMEOUT_SECS` and `ATNF_CORS_ORIGIN`.
    pub fn from_env() -> Result<Self> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut c = ServiceConfig::default();
        if let Some(v) = get("ATNF_ADDR") {
            c.addr = v
                .parse()
                .map_err(|_| Error::Config(format!("ATNF_ADDR: {v:?} is not a socket address")))?;
        }
        if let Some(v) = get("ATNF_WORKERS") {
            c.workers = v
                .parse()
                .map_err(|_| Error::Config(format!("ATNF_WORKERS: {v:?} is not a count")))?;
        }
        if let Some(v) = get("ATNF_TIMEOUT_SECS") {
            let secs: f64 = v
                .parse()
                .map_err(|_| Error::Config(format!("ATNF_TIMEOUT_SECS: {v:?} is not a number")))?;
            c.timeout = Duration::try_from_secs_f64(secs)
                .map_err(|_| Error::Config(format!("ATNF_TIMEOUT_SECS: {v:?} out of range")))?;
        }
        if let Some(v) = get("ATNF_CORS_ORIGIN") {
            c.cors_origin = Some(v);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        if self.timeout.is_zero() {
            return Err(Error::Config("timeout must be positive".into()));
        }
        Ok(())
    }
}

pub struct AppState {
    pub engine: Arc<Engine>,
    pub store: Arc<SessionStore>,
    pool: Arc<Semaphore>,
    timeout: Duration,
}

impl AppState {
    pub fn new(engine: Engine, store: SessionStore, workers: usize, timeout: Duration) -> Self {
        AppState {
            engine: Arc::new(engine),
            store: Arc::new(store),
            pool: Arc::new(Semaphore::new(workers)),
            timeout,
        }
    }

    /// Builds the engine and store for `config`, replaying persisted sessions.
    pub fn open(checkpoint: Checkpoint, config: &ServiceConfig) -> Result<Self> {
        config.validate()?;
        let engine = Engine::new(checkpoint)?;
        let store = match &config.persist {
            Some(p) => SessionStore::persistent(p, &engine)?,
            None => SessionStore::in_memory(),
        };
        Ok(Self::new(engine, store, config.workers, config.timeout))
    }
}

pub fn router(state: Arc<AppState>, cors_origin: Option<&str>) -> Result<Router> {
    let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    let cors = match cors_origin {
        None => cors.allow_origin(Any),
        Some(o) => cors.allow_origin(
            o.parse::<HeaderValue>()
                .map_err(|_| Error::Config(format!("invalid CORS origin {o:?}")))?,
        ),
    };
    Ok(routes::routes().with_state(state).layer(cors))
}

/// Serves until interrupted.
pub async fn serve(checkpoint: Checkpoint, config: ServiceConfig) -> Result<()> {
    let state = Arc::new(AppState::open(checkpoint, &config)?);
    let app = router(state.clone(), config.cors_origin.as_deref())?;
    let listener = tokio::net::TcpListener::bind(config.addr)
        .await
        .map_err(|e| Error::Config(format!("cannot bind {}: {e}", config.addr)))?;
    log::info!(
        "listening on {} with {} workers, checkpoint {}",
        config.addr,
        config.workers,
        state.engine.fingerprint()
    );
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::Contract(format!("server stopped: {e}")))
}

/// Blocking entry point that owns its runtime.
pub fn serve_blocking(checkpoint: Checkpoint, config: ServiceConfig) -> Result<()> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Contract(format!("runtime: {e}")))?
        .block_on(serve(checkpoint, config))
}
