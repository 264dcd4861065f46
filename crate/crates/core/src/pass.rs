//! Sender side of the cold-start pass: learn where the target function was
//! scheduled and ship its input to that node's buffer while it is still
//! starting.

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Bytes;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::Buffer;
use crate::clock::{ms, TraceKind, TraceLog};
use crate::watcher::Watcher;
use crate::wire;

/// Cost of moving bytes between nodes. The simulator injects a linear
/// profile; a real deployment pays the network instead.
pub trait LinkModel: Send + Sync + fmt::Debug {
    fn transfer_delay(&self, bytes: u64) -> Duration;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NoDelay;

impl LinkModel for NoDelay {
    fn transfer_delay(&self, _: u64) -> Duration {
        Duration::ZERO
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PassError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("peer rejected transfer with {status}: {reason}")]
    Rejected { status: u16, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "detail", rename_all = "snake_case")]
pub enum PassOutcome {
    Delivered,
    DeliveredLocally,
    SchedulingTimeout,
    TransferFailed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub key: String,
    pub target_function: String,
    pub host: Option<String>,
    pub wait_ms: f64,
    pub transfer_ms: f64,
    pub bytes: u64,
    pub attempts: u32,
    pub outcome: PassOutcome,
}

impl TransferReport {
    pub fn delivered(&self) -> bool {
        matches!(self.outcome, PassOutcome::Delivered | PassOutcome::DeliveredLocally)
    }
}

/// Transfer attempts per pass: the first try plus one retry.
pub const MAX_ATTEMPTS: u32 = 2;

#[derive(Debug, Clone)]
pub struct ColdStartPass {
    watcher: Watcher,
    buffer: Buffer,
    http: reqwest::Client,
    self_addr: String,
    link: Arc<dyn LinkModel>,
    trace: TraceLog,
    scheduling_timeout: Duration,
}

impl ColdStartPass {
    pub fn new(
        watcher: Watcher,
        buffer: Buffer,
        http: reqwest::Client,
        self_addr: String,
        link: Arc<dyn LinkModel>,
        trace: TraceLog,
        scheduling_timeout: Duration,
    ) -> Self {
        Self {
            watcher,
            buffer,
            http,
            self_addr,
            link,
            trace,
            scheduling_timeout,
        }
    }

    /// Waits for the target's host, then delivers `payload` under `key`:
    /// into the local buffer when the target landed on this node, otherwise
    /// to the peer sidecar.
    pub async fn initiate_pass(
        &self,
        target_function: &str,
        key: &str,
        payload: Bytes,
        trace_id: &str,
    ) -> TransferReport {
        self.trace.record(trace_id, Some(key), TraceKind::PassStart);
        let started = Instant::now();
        let bytes = payload.len() as u64;
        let mut report = TransferReport {
            key: key.to_owned(),
            target_function: target_function.to_owned(),
            host: None,
            wait_ms: 0.0,
            transfer_ms: 0.0,
            bytes,
            attempts: 0,
            outcome: PassOutcome::SchedulingTimeout,
        };
        let host = match self
            .watcher
            .wait_for_host(target_function, self.scheduling_timeout)
            .await
        {
            Ok(host) => host,
            Err(e) => {
                tracing::warn!(key, error = %e, "cold start pass aborted");
                report.wait_ms = ms(started.elapsed());
                self.trace.record(trace_id, Some(key), TraceKind::TransferFailed);
                return report;
            }
        };
        report.wait_ms = ms(started.elapsed());
        report.host = Some(host.clone());
        self.trace.record(trace_id, Some(key), TraceKind::HostKnown);

        let transfer_start = Instant::now();
        self.trace.record(trace_id, Some(key), TraceKind::TransferStart);
        if host == self.self_addr {
            report.attempts = 1;
            report.outcome = match self.buffer.put(key, payload) {
                Ok(()) => PassOutcome::DeliveredLocally,
                Err(e) => PassOutcome::TransferFailed(e.to_string()),
            };
        } else {
            self.buffer.discard(key);
            let mut last_error = None;
            for attempt in 1..=MAX_ATTEMPTS {
                report.attempts = attempt;
                match self.call_target_host_truffle(&host, key, payload.clone()).await {
                    Ok(()) => {
                        last_error = None;
                        break;
                    }
                    Err(e) => {
                        tracing::debug!(key, attempt, error = %e, "peer transfer failed");
                        last_error = Some(e);
                    }
                }
            }
            report.outcome = match last_error {
                None => PassOutcome::Delivered,
                Some(e) => PassOutcome::TransferFailed(e.to_string()),
            };
        }
        report.transfer_ms = ms(transfer_start.elapsed());
        let kind = if report.delivered() {
            TraceKind::TransferDone
        } else {
            TraceKind::TransferFailed
        };
        self.trace.record(trace_id, Some(key), kind);
        report
    }

    /// Ships `payload` to the sidecar at `host_address`, paying the link
    /// cost first.
    pub async fn call_target_host_truffle(
        &self,
        host_address: &str,
        key: &str,
        payload: Bytes,
    ) -> Result<(), PassError> {
        let delay = self.link.transfer_delay(payload.len() as u64);
        if !delay.is_zero() {
            tokio::time::sleep(delay).await;
        }
        self.relay(host_address, key, payload).await
    }

    /// Deposits bytes on a peer without charging the link model. Used when
    /// the bytes were fetched from storage, whose latency already covers the
    /// network path.
    pub async fn relay(&self, host_address: &str, key: &str, payload: Bytes) -> Result<(), PassError> {
        let resp = self
            .http
            .post(transfer_url(host_address, key))
            .body(payload)
            .send()
            .await
            .map_err(|e| PassError::Transport(e.to_string()))?;
        ack(resp).await
    }

    /// Poisons `key` on a peer so its reader fails fast.
    pub async fn relay_failure(&self, host_address: &str, key: &str, reason: &str) -> Result<(), PassError> {
        let resp = self
            .http
            .post(transfer_url(host_address, key))
            .header(wire::header(wire::ERROR), reason.replace(['\r', '\n'], " "))
            .send()
            .await
            .map_err(|e| PassError::Transport(e.to_string()))?;
        ack(resp).await
    }
}

async fn ack(resp: reqwest::Response) -> Result<(), PassError> {
    match resp.status() {
        StatusCode::OK => Ok(()),
        status => Err(PassError::Rejected {
            status: status.as_u16(),
            reason: resp.text().await.unwrap_or_default(),
        }),
    }
}

pub fn transfer_url(host_address: &str, key: &str) -> String {
    format!("http://{host_address}/truffle/transfer/{key}")
}

pub fn buffer_url(host_address: &str, key: &str) -> String {
    format!("http://{host_address}/truffle/buffer/{key}")
}
