//! Node-local sidecar: intercepts invocations, starts the data path next to
//! the platform forward for cold targets, and proxies hot ones untouched.
//!
//! Routes:
//! - `POST /invoke`: client or function invocation.
//! - `GET /truffle/buffer/{key}`: function-side read of its input.
//! - `POST /truffle/transfer/{key}`: payload pushed by a peer sidecar.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use bytes::Bytes;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::buffer::{Buffer, BufferError, DEFAULT_CAPACITY_BYTES, DEFAULT_TAKE_TIMEOUT};
use crate::clock::{TraceKind, TraceLog};
use crate::engine::DataEngine;
use crate::pool;
use crate::pass::{ColdStartPass, LinkModel, NoDelay, TransferReport};
use crate::storage::{AdapterRegistry, Credentials, StorageClient, StorageKind};
use crate::watcher::Watcher;
use crate::wire::{self, RequestEnvelope};

pub const DEFAULT_PLATFORM_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_SCHEDULING_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_BUFFER_MAX_AGE: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SidecarConfig {
    pub listen_addr: SocketAddr,
    pub platform_addr: String,
    pub buffer_capacity_bytes: u64,
    #[serde(with = "millis")]
    pub take_timeout: Duration,
    #[serde(with = "millis")]
    pub platform_timeout: Duration,
    #[serde(with = "millis")]
    pub scheduling_timeout: Duration,
    /// Buffer entries nobody read within this long are dropped.
    #[serde(with = "millis")]
    pub buffer_max_age: Duration,
    pub credentials: Credentials,
}

impl Default for SidecarConfig {
    fn default() -> Self {
        Self {
            listen_addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            platform_addr: "127.0.0.1:8080".into(),
            buffer_capacity_bytes: DEFAULT_CAPACITY_BYTES,
            take_timeout: DEFAULT_TAKE_TIMEOUT,
            platform_timeout: DEFAULT_PLATFORM_TIMEOUT,
            scheduling_timeout: DEFAULT_SCHEDULING_TIMEOUT,
            buffer_max_age: DEFAULT_BUFFER_MAX_AGE,
            credentials: Credentials::default(),
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[derive(Debug)]
struct SidecarState {
    config: SidecarConfig,
    addr: String,
    buffer: Buffer,
    watcher: Watcher,
    engine: DataEngine,
    pass: ColdStartPass,
    http: reqwest::Client,
    trace: TraceLog,
    reports: std::sync::Mutex<Vec<TransferReport>>,
}

/// Builder for a sidecar instance.
#[derive(Debug)]
pub struct Sidecar {
    config: SidecarConfig,
    watcher: Watcher,
    trace: TraceLog,
    link: Arc<dyn LinkModel>,
    registry: Option<AdapterRegistry>,
}

impl Sidecar {
    pub fn new(config: SidecarConfig, watcher: Watcher, trace: TraceLog) -> Self {
        Self {
            config,
            watcher,
            trace,
            link: Arc::new(NoDelay),
            registry: None,
        }
    }

    pub fn link_model(mut self, link: Arc<dyn LinkModel>) -> Self {
        self.link = link;
        self
    }

    pub fn adapters(mut self, registry: AdapterRegistry) -> Self {
        self.registry = Some(registry);
        self
    }

    pub async fn start(self) -> std::io::Result<SidecarHandle> {
        let listener = TcpListener::bind(self.config.listen_addr).await?;
        let local = listener.local_addr()?;
        let addr = local.to_string();
        let http = reqwest::Client::builder()
            .no_proxy()
            .build()
            .expect("http client");
        let registry = self.registry.unwrap_or_else(|| {
            AdapterRegistry::with_defaults(StorageClient::new(
                http.clone(),
                self.config.credentials.clone(),
            ))
        });
        let buffer = Buffer::new(self.config.buffer_capacity_bytes);
        let pass = ColdStartPass::new(
            self.watcher.clone(),
            buffer.clone(),
            http.clone(),
            addr.clone(),
            self.link,
            self.trace.clone(),
            self.config.scheduling_timeout,
        );
        let state = Arc::new(SidecarState {
            config: self.config,
            addr,
            buffer,
            watcher: self.watcher,
            engine: DataEngine::new(registry),
            pass,
            http,
            trace: self.trace,
            reports: Default::default(),
        });
        let app = router(state.clone());
        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
        let sweeper = spawn_sweeper(state.buffer.clone(), state.config.buffer_max_age);
        Ok(SidecarHandle {
            state,
            local,
            shutdown: Some(tx),
            task,
            sweeper,
        })
    }
}

fn router(state: Arc<SidecarState>) -> Router {
    Router::new()
        .route("/invoke", post(handle_invoke))
        .route("/truffle/buffer/{key}", get(serve_buffer_read))
        .route("/truffle/transfer/{key}", post(receive_peer_transfer))
        .layer(DefaultBodyLimit::disable())
        .with_state(state)
}

/// A running sidecar.
#[derive(Debug)]
pub struct SidecarHandle {
    state: Arc<SidecarState>,
    local: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
    sweeper: JoinHandle<()>,
}

fn spawn_sweeper(buffer: Buffer, max_age: Duration) -> JoinHandle<()> {
    let period = (max_age / 2).max(Duration::from_millis(10));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tick.tick().await;
            let removed = buffer.evict_expired(max_age);
            if removed > 0 {
                tracing::debug!(removed, "evicted abandoned buffer entries");
            }
        }
    })
}

impl SidecarHandle {
    pub fn addr(&self) -> &str {
        &self.state.addr
    }

    pub fn socket_addr(&self) -> SocketAddr {
        self.local
    }

    pub fn buffer(&self) -> &Buffer {
        &self.state.buffer
    }

    pub fn watcher(&self) -> &Watcher {
        &self.state.watcher
    }

    pub fn trace(&self) -> &TraceLog {
        &self.state.trace
    }

    pub fn engine(&self) -> &DataEngine {
        &self.state.engine
    }

    pub fn cold_start_pass(&self) -> &ColdStartPass {
        &self.state.pass
    }

    /// Reports of every cold-start pass this sidecar initiated.
    pub fn transfer_reports(&self) -> Vec<TransferReport> {
        self.state.reports.lock().unwrap().clone()
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.sweeper.abort();
        let _ = (&mut self.task).await;
    }
}

impl Drop for SidecarHandle {
    fn drop(&mut self) {
        if self.shutdown.is_some() {
            self.task.abort();
            self.sweeper.abort();
        }
    }
}

fn error_response(status: StatusCode, code: &str, message: String) -> Response {
    let mut resp = (status, message).into_response();
    if let Ok(v) = HeaderValue::from_str(code) {
        resp.headers_mut().insert(wire::header(wire::ERROR), v);
    }
    resp
}

const HOP_BY_HOP: [&str; 5] = [
    "host",
    "content-length",
    "connection",
    "transfer-encoding",
    "keep-alive",
];

fn copy_headers(src: &HeaderMap, skip: &[&str]) -> HeaderMap {
    let mut out = HeaderMap::new();
    for (name, value) in src {
        let n = name.as_str();
        if HOP_BY_HOP.contains(&n) || skip.iter().any(|s| s.eq_ignore_ascii_case(n)) {
            continue;
        }
        out.append(name.clone(), value.clone());
    }
    out
}

async fn handle_invoke(
    State(state): State<Arc<SidecarState>>,
    headers: HeaderMap,
    body: Body,
) -> Response {
    let body = match pool::collect_body(body, pool::content_length(&headers)).await {
        Ok(body) => body,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, "malformed", e.to_string()),
    };
    let envelope = match RequestEnvelope::parse(&headers, body.clone()) {
        Ok(env) => env,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, "malformed", e.to_string()),
    };
    let trace_id = envelope.trace_id.clone();

    if state.watcher.is_running(&envelope.target_function) {
        state.trace.record(&trace_id, None, TraceKind::Passthrough);
        return forward(&state, copy_headers(&headers, &[]), body).await;
    }

    let key = wire::new_reference_key();
    // Announcing can only fail on a key collision, which a fresh random key
    // cannot produce.
    let _ = state.buffer.announce(&key);
    let data_path = tokio::spawn(run_data_path(state.clone(), envelope.clone(), key.clone()));

    let mut fwd = copy_headers(&headers, &wire::STORAGE_HEADERS);
    fwd.insert(wire::header(wire::KEY), HeaderValue::from_str(&key).expect("hex key"));
    fwd.insert(
        wire::header(wire::TRACE),
        HeaderValue::from_str(&trace_id).unwrap_or_else(|_| HeaderValue::from_static("invalid")),
    );
    state.trace.record(&trace_id, Some(&key), TraceKind::ForwardStart);
    let resp = forward(&state, fwd, Bytes::new()).await;
    state.trace.record(&trace_id, Some(&key), TraceKind::ForwardDone);
    // The data path has normally finished long before the function replied;
    // detach it either way so a stuck transfer cannot hold the response.
    drop(data_path);
    resp
}

/// Gets the input to wherever the target function lands.
async fn run_data_path(state: Arc<SidecarState>, envelope: RequestEnvelope, key: String) {
    let trace_id = envelope.trace_id.as_str();
    let target = envelope.target_function.as_str();
    if envelope.storage.kind == StorageKind::Direct {
        let payload = envelope.inline_payload.clone().unwrap_or_default();
        let report = state.pass.initiate_pass(target, &key, payload, trace_id).await;
        state.reports.lock().unwrap().push(report);
        return;
    }

    state.trace.record(trace_id, Some(&key), TraceKind::PrefetchStart);
    let fetch = state.engine.fetch(&envelope.storage, envelope.inline_payload.clone());
    let host = state
        .watcher
        .wait_for_host(target, state.config.scheduling_timeout);
    let (fetched, host) = tokio::join!(fetch, host);
    match &fetched {
        Ok(_) => state.trace.record(trace_id, Some(&key), TraceKind::PrefetchDone),
        Err(_) => state.trace.record(trace_id, Some(&key), TraceKind::PrefetchFailed),
    }

    let host = match host {
        Ok(host) if host != state.addr => host,
        // Local target, or no placement known: keep the data here.
        _ => {
            let _ = match fetched {
                Ok(payload) => state
                    .buffer
                    .put(&key, payload)
                    .or_else(|e| state.buffer.mark_failed(&key, e.to_string())),
                Err(e) => state.buffer.mark_failed(&key, e.to_string()),
            };
            state.trace.record(trace_id, Some(&key), TraceKind::Deposited);
            return;
        }
    };
    state.buffer.discard(&key);
    let delivered = match fetched {
        Ok(payload) => state.pass.relay(&host, &key, payload).await,
        Err(e) => state.pass.relay_failure(&host, &key, &e.to_string()).await,
    };
    if let Err(e) = delivered {
        tracing::warn!(key, host, error = %e, "could not hand prefetched input to peer");
    }
    state.trace.record(trace_id, Some(&key), TraceKind::Deposited);
}

async fn forward(state: &SidecarState, headers: HeaderMap, body: Bytes) -> Response {
    let url = format!("http://{}/invoke", state.config.platform_addr);
    let result = state
        .http
        .post(url)
        .headers(headers)
        .body(body)
        .timeout(state.config.platform_timeout)
        .send()
        .await;
    let resp = match result {
        Ok(resp) => resp,
        Err(e) if e.is_timeout() => {
            return error_response(StatusCode::GATEWAY_TIMEOUT, "platform_timeout", e.to_string())
        }
        Err(e) => {
            return error_response(StatusCode::BAD_GATEWAY, "platform_unreachable", e.to_string())
        }
    };
    let status = resp.status();
    let headers = copy_headers(resp.headers(), &[]);
    match pool::collect_response(resp).await {
        Ok(body) => {
            let mut out = Response::new(Body::from(body));
            *out.status_mut() = status;
            *out.headers_mut() = headers;
            out
        }
        Err(e) if e.is_timeout() => {
            error_response(StatusCode::GATEWAY_TIMEOUT, "platform_timeout", e.to_string())
        }
        Err(e) => error_response(StatusCode::BAD_GATEWAY, "platform_unreachable", e.to_string()),
    }
}

#[derive(Debug, Deserialize)]
struct ReadParams {
    timeout_ms: Option<u64>,
}

async fn serve_buffer_read(
    State(state): State<Arc<SidecarState>>,
    Path(key): Path<String>,
    Query(params): Query<ReadParams>,
    headers: HeaderMap,
) -> Response {
    let timeout = params
        .timeout_ms
        .map(Duration::from_millis)
        .unwrap_or(state.config.take_timeout);
    let result = state.buffer.take(&key, timeout).await;
    if let Some(trace_id) = headers.get(wire::header(wire::TRACE)).and_then(|v| v.to_str().ok()) {
        state.trace.record(trace_id, Some(&key), TraceKind::BufferRead);
    }
    match result {
        Ok(payload) => (StatusCode::OK, payload).into_response(),
        Err(e) => buffer_error(e),
    }
}

fn buffer_error(e: BufferError) -> Response {
    let (status, code) = match &e {
        BufferError::Timeout(_) => (StatusCode::REQUEST_TIMEOUT, "timeout"),
        BufferError::FetchFailed { .. } => (StatusCode::FAILED_DEPENDENCY, "fetch_failed"),
        BufferError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
        BufferError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
        BufferError::Capacity { .. } => (StatusCode::INSUFFICIENT_STORAGE, "capacity"),
    };
    error_response(status, code, e.to_string())
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct TransferAck {
    pub key: String,
    pub bytes: u64,
}

async fn receive_peer_transfer(
    State(state): State<Arc<SidecarState>>,
    Path(key): Path<String>,
    headers: HeaderMap,
    body: Body,
) -> Response {
    let body = match pool::collect_body(body, pool::content_length(&headers)).await {
        Ok(body) => body,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, "malformed", e.to_string()),
    };
    if let Some(reason) = headers.get(wire::header(wire::ERROR)) {
        let reason = reason.to_str().unwrap_or("fetch failed").to_owned();
        return match state.buffer.mark_failed(&key, reason) {
            Ok(()) => (StatusCode::OK, axum::Json(TransferAck { key, bytes: 0 })).into_response(),
            Err(e) => buffer_error(e),
        };
    }
    let bytes = body.len() as u64;
    match state.buffer.put(&key, body) {
        Ok(()) => (StatusCode::OK, axum::Json(TransferAck { key, bytes })).into_response(),
        Err(e) => buffer_error(e),
    }
}

/// Client-side helper: request for a function input read.
pub async fn read_input(
    http: &reqwest::Client,
    sidecar_addr: &str,
    key: &str,
    trace_id: &str,
    timeout: Option<Duration>,
) -> Result<Bytes, ReadError> {
    let mut url = crate::pass::buffer_url(sidecar_addr, key);
    if let Some(t) = timeout {
        url.push_str(&format!("?timeout_ms={}", t.as_millis()));
    }
    let resp = http
        .get(url)
        .header(wire::header(wire::TRACE), trace_id)
        .send()
        .await
        .map_err(|e| ReadError::Transport(e.to_string()))?;
    let status = resp.status();
    if status.is_success() {
        return pool::collect_response(resp)
            .await
            .map_err(|e| ReadError::Transport(e.to_string()));
    }
    let message = resp.text().await.unwrap_or_default();
    Err(match status {
        reqwest::StatusCode::REQUEST_TIMEOUT => ReadError::Timeout(message),
        reqwest::StatusCode::FAILED_DEPENDENCY => ReadError::FetchFailed(message),
        reqwest::StatusCode::NOT_FOUND => ReadError::NotFound(message),
        other => ReadError::Other(other.as_u16(), message),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReadError {
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("fetch failed: {0}")]
    FetchFailed(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("status {0}: {1}")]
    Other(u16, String),
    #[error("transport error: {0}")]
    Transport(String),
}
