//! Per-invocation phase timestamps and the record built from them.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use truffle_core::{StorageKind, TraceEvent, TransferReport};

use crate::runtime::FunctionResponse;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Truffle,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Baseline, Mode::Truffle];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Truffle => "truffle",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "truffle" => Ok(Mode::Truffle),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePhase {
    Scheduling,
    Input,
    Downstream,
    Platform,
    Client,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub phase: FailurePhase,
    pub function: Option<String>,
    pub message: String,
}

/// Raw timestamps of one function invocation, in wall-clock milliseconds on
/// the cluster clock. Phases that did not happen stay `None`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InvocationTrace {
    pub invocation_id: u64,
    pub parent: Option<u64>,
    pub trace_id: String,
    pub function: String,
    pub node: usize,
    pub cold: bool,
    pub input_bytes: u64,
    pub invoked: f64,
    pub scheduled: Option<f64>,
    pub cold_start_end: Option<f64>,
    pub data_ready: Option<f64>,
    pub compute_start: Option<f64>,
    pub compute_end: Option<f64>,
    pub response: Option<f64>,
    pub failure: Option<Failure>,
}

/// Timestamps of one function invocation in model milliseconds since the
/// client sent the workflow request. Non-decreasing in field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionPhases {
    pub invocation_id: u64,
    pub parent: Option<u64>,
    pub function: String,
    pub node: usize,
    pub cold: bool,
    pub input_bytes: u64,
    pub invoked_ms: f64,
    pub scheduled_ms: f64,
    pub cold_start_end_ms: f64,
    pub data_ready_ms: f64,
    pub compute_start_ms: f64,
    pub compute_end_ms: f64,
    pub response_ms: f64,
}

impl FunctionPhases {
    /// Time the started function spent waiting for its input.
    pub fn io_wait_ms(&self) -> f64 {
        self.data_ready_ms - self.cold_start_end_ms
    }

    /// Converts raw timestamps, filling missing phases with the previous one
    /// and clamping so the sequence never goes backwards.
    pub fn from_trace(t: &InvocationTrace, origin_ms: f64, scale: f64) -> Self {
        let to_model = |at: f64| (at - origin_ms) / scale;
        let mut last = to_model(t.invoked);
        let invoked_ms = last;
        let mut next = |raw: Option<f64>| {
            if let Some(at) = raw {
                last = last.max(to_model(at));
            }
            last
        };
        Self {
            invocation_id: t.invocation_id,
            parent: t.parent,
            function: t.function.clone(),
            node: t.node,
            cold: t.cold,
            input_bytes: t.input_bytes,
            invoked_ms,
            scheduled_ms: next(t.scheduled),
            cold_start_end_ms: next(t.cold_start_end),
            data_ready_ms: next(t.data_ready),
            compute_start_ms: next(t.compute_start),
            compute_end_ms: next(t.compute_end),
            response_ms: next(t.response),
        }
    }
}

/// Largest total input wait along any root-to-leaf chain of invocations.
pub fn io_critical_path_ms(functions: &[FunctionPhases]) -> f64 {
    let mut children: HashMap<Option<u64>, Vec<&FunctionPhases>> = HashMap::new();
    for f in functions {
        children.entry(f.parent).or_default().push(f);
    }
    let known: std::collections::HashSet<u64> = functions.iter().map(|f| f.invocation_id).collect();
    fn walk(f: &FunctionPhases, children: &HashMap<Option<u64>, Vec<&FunctionPhases>>) -> f64 {
        let below = children
            .get(&Some(f.invocation_id))
            .into_iter()
            .flatten()
            .map(|c| walk(c, children))
            .fold(0.0, f64::max);
        f.io_wait_ms() + below
    }
    functions
        .iter()
        .filter(|f| f.parent.is_none_or(|p| !known.contains(&p)))
        .map(|f| walk(f, &children))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub trace_id: String,
    pub workload: String,
    pub storage_kind: StorageKind,
    pub size_mb: f64,
    pub added_delay_ms: f64,
    pub mode: Mode,
    pub repetition: u32,
    pub status: u16,
    pub end_to_end_ms: f64,
    pub io_critical_path_ms: f64,
    pub failure: Option<Failure>,
    pub functions: Vec<FunctionPhases>,
    pub transfers: Vec<TransferReport>,
    /// Sidecar trace events, timestamps in model ms since the request.
    pub events: Vec<TraceEvent>,
    /// What the entry function answered, when it answered with JSON.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<FunctionResponse>,
}

impl MeasurementRecord {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    pub fn function(&self, name: &str) -> Option<&FunctionPhases> {
        self.functions.iter().find(|f| f.function == name)
    }
}

/// Shared sink the platform writes invocation traces into.
#[derive(Debug, Clone, Default)]
pub struct TraceCollector {
    inner: Arc<Mutex<Collected>>,
}

#[derive(Debug, Default)]
struct Collected {
    next_id: u64,
    traces: Vec<InvocationTrace>,
}

impl TraceCollector {
    pub fn next_id(&self) -> u64 {
        let mut inner = self.inner.lock().unwrap();
        inner.next_id += 1;
        inner.next_id
    }

    pub fn push(&self, trace: InvocationTrace) {
        self.inner.lock().unwrap().traces.push(trace);
    }

    pub fn take(&self, trace_id: &str) -> Vec<InvocationTrace> {
        let mut inner = self.inner.lock().unwrap();
        let (mine, rest) = std::mem::take(&mut inner.traces)
            .into_iter()
            .partition(|t| t.trace_id == trace_id);
        inner.traces = rest;
        mine
    }
}
