//! A small SPARQL-protocol HTTP server over an in-memory [`TripleStore`].
//!
//! Queries are answered with the subset parser and executor. A scripted
//! `fail_pattern` and an artificial latency make client behavior testable.

use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use thiserror::Error;
use tokio::runtime::Runtime;
use tokio::sync::oneshot;

use crate::sparql::json::{self, MEDIA_TYPE};
use crate::sparql::{execute_subset, parse_subset, TripleStore};

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    pub bind: String,
    pub artificial_latency: Option<Duration>,
    /// Status codes returned for the first requests, in order. A 200 entry
    /// means "answer normally"; requests past the end are answered normally.
    pub fail_pattern: Vec<u16>,
}

impl ServerConfig {
    pub fn local() -> Self {
        Self {
            bind: "127.0.0.1:0".into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error("cannot start server runtime: {0}")]
    Runtime(std::io::Error),
}

/// Counters observable by tests and operators.
#[derive(Debug, Default)]
pub struct ServerStats {
    requests: AtomicU64,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    arrivals: Mutex<Vec<Instant>>,
}

impl ServerStats {
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    /// Arrival time of every request, in arrival order.
    pub fn arrivals(&self) -> Vec<Instant> {
        self.arrivals.lock().unwrap().clone()
    }
}

struct AppState {
    store: Arc<TripleStore>,
    cfg: ServerConfig,
    stats: Arc<ServerStats>,
}

/// A running endpoint. Dropping the handle stops the server.
pub struct ServerHandle {
    addr: SocketAddr,
    stats: Arc<ServerStats>,
    shutdown: Option<oneshot::Sender<()>>,
    runtime: Option<Runtime>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// The query URL, e.g. `http://127.0.0.1:7878/sparql`.
    pub fn url(&self) -> String {
        format!("http://{}/sparql", self.addr)
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    /// Blocks until SIGINT or SIGTERM, then stops gracefully.
    pub fn run_until_signal(mut self) {
        if let Some(rt) = &self.runtime {
            rt.block_on(wait_for_signal());
        }
        self.stop();
    }

    pub fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_timeout(Duration::from_millis(500));
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

async fn wait_for_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = match signal(SignalKind::terminate()) {
            Ok(s) => s,
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
                return;
            }
        };
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

/// Starts serving `store` on `cfg.bind` (use port 0 for an ephemeral port).
pub fn serve(store: Arc<TripleStore>, cfg: ServerConfig) -> Result<ServerHandle, ServeError> {
    let listener = TcpListener::bind(&cfg.bind).map_err(|source| ServeError::Bind {
        addr: cfg.bind.clone(),
        source,
    })?;
    listener
        .set_nonblocking(true)
        .map_err(ServeError::Runtime)?;
    let addr = listener.local_addr().map_err(ServeError::Runtime)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .thread_name("kgqa-endpoint")
        .enable_all()
        .build()
        .map_err(ServeError::Runtime)?;
    let stats = Arc::new(ServerStats::default());
    let state = Arc::new(AppState {
        store,
        cfg,
        stats: stats.clone(),
    });
    let app = Router::new()
        .route("/sparql", get(handle).post(handle))
        .route("/", get(handle).post(handle))
        .with_state(state);
    let (tx, rx) = oneshot::channel::<()>();
    let listener = {
        let _guard = runtime.enter();
        tokio::net::TcpListener::from_std(listener).map_err(ServeError::Runtime)?
    };
    runtime.spawn(async move {
        let server = axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = rx.await;
        });
        if let Err(e) = server.await {
            log::error!("endpoint stopped with error: {e}");
        }
    });
    Ok(ServerHandle {
        addr,
        stats,
        shutdown: Some(tx),
        runtime: Some(runtime),
    })
}

struct InFlight<'a>(&'a ServerStats);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn handle(
    State(state): State<Arc<AppState>>,
    method: Method,
    Query(params): Query<HashMap<String, String>>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let stats = &state.stats;
    let index = stats.requests.fetch_add(1, Ordering::SeqCst) as usize;
    stats.arrivals.lock().unwrap().push(Instant::now());
    let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    stats.max_in_flight.fetch_max(now, Ordering::SeqCst);
    let _guard = InFlight(stats);

    if let Some(latency) = state.cfg.artificial_latency {
        tokio::time::sleep(latency).await;
    }
    if let Some(&status) = state.cfg.fail_pattern.get(index) {
        if status != 200 {
            let code = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            return (code, format!("scripted status {status}")).into_response();
        }
    }

    let query = match extract_query(&method, &params, &headers, &body) {
        Some(q) => q,
        None => return (StatusCode::BAD_REQUEST, "missing 'query' parameter").into_response(),
    };
    let parsed = match parse_subset(&query, state.store.prefixes()) {
        Ok(q) => q,
        Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    };
    let result = execute_subset(&parsed, &state.store);
    let body = json::to_json(&result).to_string();
    ([(header::CONTENT_TYPE, MEDIA_TYPE)], body).into_response()
}

fn extract_query(
    method: &Method,
    params: &HashMap<String, String>,
    headers: &HeaderMap,
    body: &[u8],
) -> Option<String> {
    if let Some(q) = params.get("query") {
        return Some(q.clone());
    }
    if method != Method::POST {
        return None;
    }
    let content_type = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("");
    if content_type.starts_with("application/sparql-query") {
        return String::from_utf8(body.to_vec()).ok();
    }
    form_urlencoded::parse(body)
        .find(|(k, _)| k == "query")
        .map(|(_, v)| v.into_owned())
}
