//! Simulated orchestrator and serverless platform: scale-from-zero
//! lifecycle, scheduling events, and the `/invoke` endpoint that runs
//! functions once they are up.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::extract::State;
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use tokio::net::TcpListener;
use tokio::sync::{oneshot, watch};
use tokio::task::JoinHandle;
use truffle_core::storage::StorageClient;
use truffle_core::watcher::EventFeed;
use truffle_core::{pool, wire, Clock, EventKind, LinkModel, SchedulingEvent, Watcher};

use crate::config::{FunctionSpec, InputBinding};
use crate::profile::{scaled, LinearLink};
use crate::record::{Failure, FailurePhase, InvocationTrace, TraceCollector};
use crate::runtime::{self, Invocation, PayloadCache};

/// Simulation headers carried alongside the sidecar's own.
pub mod headers {
    /// `baseline` or `truffle`; decides how functions call downstream.
    pub const MODE: &str = "X-Sim-Mode";
    /// Node index of the caller. Absent for the external client.
    pub const ORIGIN: &str = "X-Sim-Origin";
    pub const PARENT: &str = "X-Sim-Parent";
    /// Output size in bytes each function emits.
    pub const SIZE: &str = "X-Sim-Size";
    /// `sha256` asks functions to report a SHA-256 of their input.
    pub const DIGEST: &str = "X-Sim-Digest";
    /// Failure phase on error responses.
    pub const FAILURE: &str = "X-Sim-Failure";
}

/// Fans lifecycle events out to every subscribed watcher and keeps a log.
#[derive(Debug, Clone, Default)]
pub struct Orchestrator {
    watchers: Arc<Mutex<Vec<Watcher>>>,
    log: Arc<Mutex<Vec<SchedulingEvent>>>,
}

impl EventFeed for Orchestrator {
    fn subscribe(&self, watcher: Watcher) {
        self.watchers.lock().unwrap().push(watcher);
    }
}

impl Orchestrator {
    pub fn publish(&self, event: SchedulingEvent) {
        for w in self.watchers.lock().unwrap().iter() {
            if let Err(e) = w.ingest_event(event.clone()) {
                tracing::warn!(error = %e, "watcher rejected event");
            }
        }
        self.log.lock().unwrap().push(event);
    }

    pub fn events(&self) -> Vec<SchedulingEvent> {
        self.log.lock().unwrap().clone()
    }
}

/// Instance state of one function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lifecycle {
    Cold,
    Starting { scheduled: Option<f64> },
    Running { scheduled: f64, running: f64 },
}

#[derive(Debug, Clone)]
pub(crate) struct Deployed {
    pub spec: FunctionSpec,
    pub node: usize,
    pub binding: InputBinding,
}

#[derive(Debug)]
pub(crate) struct PlatformState {
    pub clock: Clock,
    pub scale: f64,
    pub alpha_ms: f64,
    pub addr: String,
    pub functions: HashMap<String, Deployed>,
    pub added_delay_ms: Mutex<HashMap<String, f64>>,
    pub instances: HashMap<String, watch::Sender<Lifecycle>>,
    pub orchestrator: Orchestrator,
    /// Sidecar address per node, which doubles as the node's host address.
    pub node_addrs: Vec<String>,
    pub link: LinearLink,
    pub http: reqwest::Client,
    pub storage: StorageClient,
    pub backend_endpoint: String,
    pub credentials: HashMap<String, String>,
    pub collector: TraceCollector,
    pub payloads: PayloadCache,
    pub scheduling_timeout: Duration,
    pub input_timeout: Duration,
    pub request_timeout: Duration,
}

impl PlatformState {
    fn host(&self, node: usize) -> &str {
        &self.node_addrs[node]
    }
}

/// Handle to a running platform endpoint.
#[derive(Debug)]
pub struct Platform {
    pub(crate) state: Arc<PlatformState>,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl Drop for Platform {
    fn drop(&mut self) {
        self.task.abort();
    }
}

impl Platform {
    pub(crate) fn serve(listener: TcpListener, state: PlatformState) -> Self {
        let state = Arc::new(state);
        let app = Router::new()
            .route("/invoke", post(handle_invoke))
            .layer(axum::extract::DefaultBodyLimit::disable())
            .with_state(state.clone());
        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
        Self {
            state,
            shutdown: Some(tx),
            task,
        }
    }

    pub fn addr(&self) -> &str {
        &self.state.addr
    }

    pub fn shutdown(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }

    pub fn socket_addr(&self) -> SocketAddr {
        self.state.addr.parse().expect("bound address")
    }

    pub fn orchestrator(&self) -> &Orchestrator {
        &self.state.orchestrator
    }

    pub fn lifecycle(&self, function: &str) -> Option<Lifecycle> {
        self.state.instances.get(function).map(|tx| *tx.borrow())
    }

    pub fn set_added_delay(&self, function: &str, delay_ms: f64) {
        self.state
            .added_delay_ms
            .lock()
            .unwrap()
            .insert(function.to_owned(), delay_ms);
    }

    /// Brings warm functions up without paying scheduling or cold start.
    pub(crate) fn start_warm(&self) {
        let s = &self.state;
        for (name, d) in &s.functions {
            if !d.spec.warm {
                continue;
            }
            let now = s.clock.now_ms();
            s.orchestrator
                .publish(SchedulingEvent::new(name, s.host(d.node), EventKind::Scheduled, now));
            s.orchestrator
                .publish(SchedulingEvent::new(name, s.host(d.node), EventKind::Running, now));
            s.instances[name].send_replace(Lifecycle::Running {
                scheduled: now,
                running: now,
            });
        }
    }

    /// Terminates every function that is not warm, waiting for instances
    /// that are still starting. Call between workflow runs.
    pub async fn scale_to_zero(&self) {
        let s = &self.state;
        for (name, d) in &s.functions {
            if d.spec.warm {
                continue;
            }
            let tx = &s.instances[name];
            let mut rx = tx.subscribe();
            if matches!(*rx.borrow(), Lifecycle::Starting { .. }) {
                let _ = rx.wait_for(|l| !matches!(l, Lifecycle::Starting { .. })).await;
            }
            if matches!(*tx.borrow(), Lifecycle::Running { .. }) {
                tx.send_replace(Lifecycle::Cold);
                s.orchestrator.publish(SchedulingEvent::new(
                    name,
                    s.host(d.node),
                    EventKind::Terminated,
                    s.clock.now_ms(),
                ));
            }
        }
    }

    pub async fn scheduler_tick(&self, function: &str) -> Vec<SchedulingEvent> {
        scheduler_tick(&self.state, function).await
    }
}

/// Places a cold function: after the scheduling latency emits `scheduled`
/// with its node's host address, then after cold start plus any added delay
/// emits `running`. Returns the events emitted.
pub(crate) async fn scheduler_tick(state: &PlatformState, function: &str) -> Vec<SchedulingEvent> {
    let Some(d) = state.functions.get(function) else {
        return Vec::new();
    };
    let tx = &state.instances[function];
    let host = state.host(d.node).to_owned();

    sleep_model(state.alpha_ms, state.scale).await;
    let scheduled = state.clock.now_ms();
    let first = SchedulingEvent::new(function, &host, EventKind::Scheduled, scheduled);
    state.orchestrator.publish(first.clone());
    tx.send_replace(Lifecycle::Starting {
        scheduled: Some(scheduled),
    });

    let added = state
        .added_delay_ms
        .lock()
        .unwrap()
        .get(function)
        .copied()
        .unwrap_or(d.spec.added_delay_ms);
    sleep_model(d.spec.cold_start_ms + added, state.scale).await;
    let running = state.clock.now_ms();
    let second = SchedulingEvent::new(function, &host, EventKind::Running, running);
    state.orchestrator.publish(second.clone());
    tx.send_replace(Lifecycle::Running { scheduled, running });
    vec![first, second]
}

pub(crate) async fn sleep_model(model_ms: f64, scale: f64) {
    let d = scaled(model_ms, scale);
    if !d.is_zero() {
        tokio::time::sleep(d).await;
    }
}

/// Result of waiting for an instance: whether the caller found it cold, and
/// the lifecycle timestamps of the instance that serves it.
struct Ready {
    cold: bool,
    scheduled: f64,
    running: f64,
}

async fn ensure_running(state: &Arc<PlatformState>, function: &str) -> Option<Ready> {
    let tx = &state.instances[function];
    let mut rx = {
        let mut spawned = false;
        tx.send_if_modified(|l| {
            if *l == Lifecycle::Cold {
                *l = Lifecycle::Starting { scheduled: None };
                spawned = true;
                true
            } else {
                false
            }
        });
        if spawned {
            let state = state.clone();
            let name = function.to_owned();
            tokio::spawn(async move { scheduler_tick(&state, &name).await });
        }
        tx.subscribe()
    };
    let cold = !matches!(*rx.borrow(), Lifecycle::Running { .. });
    let waited = tokio::time::timeout(
        state.scheduling_timeout,
        rx.wait_for(|l| matches!(l, Lifecycle::Running { .. })),
    )
    .await;
    match waited {
        Ok(Ok(l)) => match *l {
            Lifecycle::Running { scheduled, running } => Some(Ready {
                cold,
                scheduled,
                running,
            }),
            _ => None,
        },
        _ => None,
    }
}

pub(crate) fn header_str<'a>(headers: &'a HeaderMap, name: &str) -> Option<&'a str> {
    headers.get(wire::header(name))?.to_str().ok()
}

pub(crate) fn failure_response(status: StatusCode, failure: &Failure) -> Response {
    let mut resp = (
        status,
        serde_json::to_vec(failure).unwrap_or_default(),
    )
        .into_response();
    let phase = serde_json::to_value(failure.phase)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default();
    if let Ok(v) = HeaderValue::from_str(&phase) {
        resp.headers_mut().insert(wire::header(headers::FAILURE), v);
    }
    resp
}

async fn handle_invoke(
    State(state): State<Arc<PlatformState>>,
    headers: HeaderMap,
    body: Body,
) -> Response {
    let invoked = state.clock.now_ms();
    let body = match pool::collect_body(body, pool::content_length(&headers)).await {
        Ok(body) => body,
        Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    };
    let Some(target) = header_str(&headers, wire::TARGET).map(str::to_owned) else {
        return (StatusCode::BAD_REQUEST, "missing target").into_response();
    };
    let Some(deployed) = state.functions.get(&target).cloned() else {
        return (StatusCode::NOT_FOUND, format!("unknown function {target:?}")).into_response();
    };
    let inv = Invocation::from_headers(&headers, body);
    let invocation_id = state.collector.next_id();
    let mut trace = InvocationTrace {
        invocation_id,
        parent: inv.parent,
        trace_id: inv.trace_id.clone(),
        function: target.clone(),
        node: deployed.node,
        input_bytes: 0,
        invoked,
        ..Default::default()
    };

    let Some(ready) = ensure_running(&state, &target).await else {
        let failure = Failure {
            phase: FailurePhase::Scheduling,
            function: Some(target),
            message: "function did not start before the scheduling deadline".into(),
        };
        trace.failure = Some(failure.clone());
        trace.response = Some(state.clock.now_ms());
        state.collector.push(trace);
        return failure_response(StatusCode::GATEWAY_TIMEOUT, &failure);
    };
    trace.cold = ready.cold;
    trace.scheduled = Some(ready.scheduled);
    trace.cold_start_end = Some(ready.running);

    // Inline payloads from another node only start moving once the function
    // is up and pulls its request.
    if !inv.body.is_empty() && inv.origin.is_some_and(|o| o != deployed.node) {
        let delay = state.link.transfer_delay(inv.body.len() as u64);
        if !delay.is_zero() {
            tokio::time::sleep(delay).await;
        }
    }

    let (status, resp_body, failure) =
        runtime::run_function(&state, &deployed, invocation_id, &inv, &mut trace).await;
    trace.response = Some(state.clock.now_ms());
    trace.failure = failure.clone();
    state.collector.push(trace);

    match failure {
        Some(f) if status != StatusCode::OK => {
            let mut resp = failure_response(status, &f);
            if !resp_body.is_empty() {
                *resp.body_mut() = Body::from(resp_body);
            }
            resp
        }
        _ => (status, [("content-type", "application/json")], resp_body).into_response(),
    }
}
