//! Deploying a workflow onto simulated nodes and running it end to end.

use std::collections::{HashMap, HashSet};
use std::time::Duration;

use axum::http::HeaderValue;
use tokio::net::TcpListener;
use tokio::sync::watch;
use truffle_core::storage::StorageClient;
use truffle_core::watcher::EventFeed;
use truffle_core::{
    wire, Clock, Credentials, SchedulingEvent, Sidecar, SidecarConfig, SidecarHandle, StorageDescriptor,
    TraceLog, Watcher,
};

use crate::backend::StorageBackend;
use crate::config::{ClusterConfig, ConfigError};
use crate::platform::{headers, Deployed, Lifecycle, Platform, PlatformState};
use crate::profile::{LinearLink, MIB};
use crate::record::{
    io_critical_path_ms, Failure, FailurePhase, FunctionPhases, MeasurementRecord, Mode, TraceCollector,
};
use crate::runtime::PayloadCache;

#[derive(Debug, thiserror::Error)]
pub enum DeployError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot start cluster service: {0}")]
    Io(#[from] std::io::Error),
}

/// Options for one workflow run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub size_mb: f64,
    pub mode: Mode,
    /// Ask every function for a SHA-256 of its input.
    pub digest: bool,
    pub repetition: u32,
}

impl RunOptions {
    pub fn new(size_mb: f64, mode: Mode) -> Self {
        Self {
            size_mb,
            mode,
            digest: false,
            repetition: 0,
        }
    }

    pub fn size_bytes(&self) -> u64 {
        (self.size_mb.max(0.0) * MIB).round() as u64
    }
}

/// A deployed workflow: one sidecar per node, the platform, and the storage
/// backend.
#[derive(Debug)]
pub struct Cluster {
    config: ClusterConfig,
    clock: Clock,
    sidecars: Vec<SidecarHandle>,
    platform: Platform,
    backend: StorageBackend,
    http: reqwest::Client,
    placement: HashMap<String, usize>,
    added_delay_ms: f64,
}

/// Validates `config` and brings the cluster up. Functions are registered
/// cold except those marked warm.
pub async fn deploy(config: ClusterConfig) -> Result<Cluster, DeployError> {
    config.validate()?;
    let clock = Clock::new();
    let scale = config.scale_factor;
    let http = reqwest::Client::builder()
        .no_proxy()
        .pool_max_idle_per_host(64)
        .build()
        .expect("http client");

    let backend = StorageBackend::start(config.backends.kvs, config.backends.object_store, scale).await?;
    let mut credentials = Credentials::new();
    for (name, secret) in &config.credentials {
        credentials = credentials.with(name.clone(), secret.clone());
    }

    let platform_listener = TcpListener::bind("127.0.0.1:0").await?;
    let platform_addr = platform_listener.local_addr()?.to_string();

    let link = LinearLink {
        profile: config.backends.direct,
        scale,
    };
    let orchestrator = crate::platform::Orchestrator::default();
    let mut sidecars = Vec::with_capacity(config.nodes);
    for _ in 0..config.nodes {
        let watcher = Watcher::new();
        orchestrator.subscribe(watcher.clone());
        let sidecar_config = SidecarConfig {
            platform_addr: platform_addr.clone(),
            take_timeout: Duration::from_millis(config.timeouts.input_ms),
            platform_timeout: Duration::from_millis(config.timeouts.request_ms),
            scheduling_timeout: Duration::from_millis(config.timeouts.scheduling_ms),
            credentials: credentials.clone(),
            ..SidecarConfig::default()
        };
        let sidecar = Sidecar::new(sidecar_config, watcher, TraceLog::new(clock))
            .link_model(std::sync::Arc::new(link))
            .start()
            .await?;
        sidecars.push(sidecar);
    }
    let node_addrs: Vec<String> = sidecars.iter().map(|s| s.addr().to_owned()).collect();

    let labels = config.workflow.placements();
    let mut placement = HashMap::new();
    let mut functions = HashMap::new();
    let mut instances = HashMap::new();
    let mut protected = HashSet::new();
    for f in &config.workflow.functions {
        let node = labels
            .iter()
            .position(|l| l == f.placement_label())
            .expect("label collected from the same workflow");
        let binding = config.workflow.binding(f);
        if let (Some(bucket), Some(r)) = (&binding.bucket, &binding.credentials_ref) {
            if let Some(secret) = config.credentials.get(r) {
                if protected.insert(bucket.clone()) {
                    backend.protect_bucket(bucket, secret);
                }
            }
        }
        placement.insert(f.name.clone(), node);
        functions.insert(
            f.name.clone(),
            Deployed {
                spec: f.clone(),
                node,
                binding,
            },
        );
        instances.insert(f.name.clone(), watch::channel(Lifecycle::Cold).0);
    }

    let state = PlatformState {
        clock,
        scale,
        alpha_ms: config.alpha_ms,
        addr: platform_addr,
        functions,
        added_delay_ms: Default::default(),
        instances,
        orchestrator,
        node_addrs,
        link,
        http: http.clone(),
        storage: StorageClient::new(http.clone(), credentials),
        backend_endpoint: backend.endpoint(),
        credentials: config.credentials.clone(),
        collector: TraceCollector::default(),
        payloads: PayloadCache::default(),
        scheduling_timeout: Duration::from_millis(config.timeouts.scheduling_ms),
        input_timeout: Duration::from_millis(config.timeouts.input_ms),
        request_timeout: Duration::from_millis(config.timeouts.request_ms),
    };
    let platform = Platform::serve(platform_listener, state);
    platform.start_warm();

    Ok(Cluster {
        config,
        clock,
        sidecars,
        platform,
        backend,
        http,
        placement,
        added_delay_ms: 0.0,
    })
}

impl Cluster {
    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn scale(&self) -> f64 {
        self.config.scale_factor
    }

    pub fn sidecars(&self) -> &[SidecarHandle] {
        &self.sidecars
    }

    pub fn sidecar(&self, node: usize) -> &SidecarHandle {
        &self.sidecars[node]
    }

    pub fn platform(&self) -> &Platform {
        &self.platform
    }

    pub fn backend(&self) -> &StorageBackend {
        &self.backend
    }

    pub fn http(&self) -> &reqwest::Client {
        &self.http
    }

    /// Node index the function is pinned to.
    pub fn node_of(&self, function: &str) -> Option<usize> {
        self.placement.get(function).copied()
    }

    pub fn events(&self) -> Vec<SchedulingEvent> {
        self.platform.orchestrator().events()
    }

    /// Payload the workflow's entry emits for `bytes`.
    pub fn payload(&self, bytes: u64) -> bytes::Bytes {
        self.platform.state.payloads.get(bytes)
    }

    /// Sets the added cold-start delay of every function that can go cold.
    pub fn set_added_delay(&mut self, delay_ms: f64) {
        self.added_delay_ms = delay_ms;
        for f in self.config.workflow.functions.iter().filter(|f| !f.warm) {
            self.platform.set_added_delay(&f.name, delay_ms);
        }
    }

    pub fn added_delay_ms(&self) -> f64 {
        self.added_delay_ms
    }

    pub async fn scale_to_zero(&self) {
        self.platform.scale_to_zero().await;
    }

    /// Runs the workflow once from cold: non-warm functions are scaled to
    /// zero first, then the entry function is triggered and the call blocks
    /// until the whole DAG has answered.
    pub async fn invoke_workflow(&self, opts: &RunOptions) -> MeasurementRecord {
        self.scale_to_zero().await;
        let size = opts.size_bytes();
        // Generate the payload before the clock starts.
        let _ = self.payload(size);

        let entry = self.config.workflow.entry().name.clone();
        let entry_node = self.placement[&entry];
        let trace_id = wire::new_reference_key();
        let mut h = wire::invoke_headers(&entry, &StorageDescriptor::direct(), &trace_id);
        let mut set = |name: &str, value: String| {
            if let Ok(v) = HeaderValue::from_str(&value) {
                h.insert(wire::header(name), v);
            }
        };
        set(headers::MODE, opts.mode.to_string());
        set(headers::SIZE, size.to_string());
        if opts.digest {
            set(headers::DIGEST, "sha256".into());
        }
        let via = match opts.mode {
            Mode::Truffle => self.sidecars[entry_node].addr().to_owned(),
            Mode::Baseline => self.platform.addr().to_owned(),
        };

        let sent = self.clock.now_ms();
        let result = self
            .http
            .post(format!("http://{via}/invoke"))
            .headers(h)
            .timeout(Duration::from_millis(self.config.timeouts.request_ms))
            .send()
            .await;
        let (status, body, client_error) = match result {
            Ok(resp) => {
                let status = resp.status().as_u16();
                match truffle_core::pool::collect_response(resp).await {
                    Ok(b) => (status, b, None),
                    Err(e) => (status, bytes::Bytes::new(), Some(e.to_string())),
                }
            }
            Err(e) => (0, bytes::Bytes::new(), Some(e.to_string())),
        };
        let done = self.clock.now_ms();
        // Intermediate outputs are named after the trace.
        self.backend.purge(&trace_id);
        self.collect(opts, trace_id, sent, done, status, &body, client_error)
    }

    #[allow(clippy::too_many_arguments)]
    fn collect(
        &self,
        opts: &RunOptions,
        trace_id: String,
        sent: f64,
        done: f64,
        status: u16,
        body: &[u8],
        client_error: Option<String>,
    ) -> MeasurementRecord {
        let scale = self.scale();
        let traces = self.platform.state.collector.take(&trace_id);
        let mut functions: Vec<FunctionPhases> = traces
            .iter()
            .map(|t| FunctionPhases::from_trace(t, sent, scale))
            .collect();
        functions.sort_by(|a, b| a.invoked_ms.total_cmp(&b.invoked_ms));

        let mut events = Vec::new();
        let mut keys = HashSet::new();
        for s in &self.sidecars {
            for mut e in s.trace().for_trace(&trace_id) {
                if let Some(k) = &e.key {
                    keys.insert(k.clone());
                }
                e.at_ms = (e.at_ms - sent) / scale;
                events.push(e);
            }
        }
        events.sort_by(|a, b| a.at_ms.total_cmp(&b.at_ms));
        let transfers = self
            .sidecars
            .iter()
            .flat_map(|s| s.transfer_reports())
            .filter(|r| keys.contains(&r.key))
            .collect();

        let failure = if let Some(message) = client_error {
            Some(Failure {
                phase: FailurePhase::Client,
                function: None,
                message,
            })
        } else if status != 200 {
            let deepest = traces
                .iter()
                .filter_map(|t| t.failure.clone())
                .find(|f| f.phase != FailurePhase::Downstream);
            Some(deepest.unwrap_or_else(|| Failure {
                phase: FailurePhase::Platform,
                function: None,
                message: format!(
                    "status {status}: {}",
                    String::from_utf8_lossy(&body[..body.len().min(200)])
                ),
            }))
        } else {
            None
        };

        MeasurementRecord {
            trace_id,
            workload: self.config.workflow.name.clone(),
            storage_kind: self.config.workflow.storage_kind,
            size_mb: opts.size_mb,
            added_delay_ms: self.added_delay_ms,
            mode: opts.mode,
            repetition: opts.repetition,
            status,
            end_to_end_ms: (done - sent) / scale,
            io_critical_path_ms: io_critical_path_ms(&functions),
            failure,
            functions,
            transfers,
            events,
            response: serde_json::from_slice(body).ok(),
        }
    }

    pub async fn shutdown(mut self) {
        self.platform.shutdown();
        for s in self.sidecars {
            s.shutdown().await;
        }
        self.backend.shutdown();
    }
}
