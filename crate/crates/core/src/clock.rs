use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Monotonic clock shared by every component of one deployment so that
/// timestamps taken on different nodes are directly comparable.
#[derive(Debug, Clone, Copy)]
pub struct Clock {
    epoch: Instant,
}

impl Default for Clock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock {
    pub fn new() -> Self {
        Self { epoch: Instant::now() }
    }

    pub fn epoch(&self) -> Instant {
        self.epoch
    }

    /// Milliseconds elapsed since the epoch.
    pub fn now_ms(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64() * 1e3
    }

    pub fn since_ms(&self, at: Instant) -> f64 {
        at.saturating_duration_since(self.epoch).as_secs_f64() * 1e3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Passthrough,
    ForwardStart,
    ForwardDone,
    PrefetchStart,
    PrefetchDone,
    PrefetchFailed,
    PassStart,
    HostKnown,
    TransferStart,
    TransferDone,
    TransferFailed,
    Deposited,
    BufferRead,
}

/// One sidecar-side event, stamped in milliseconds on the shared clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub trace_id: String,
    pub key: Option<String>,
    pub kind: TraceKind,
    pub at_ms: f64,
}

/// Append-only log of sidecar events, shared across tasks.
#[derive(Debug, Clone)]
pub struct TraceLog {
    clock: Clock,
    events: Arc<Mutex<Vec<TraceEvent>>>,
}

impl TraceLog {
    pub fn new(clock: Clock) -> Self {
        Self {
            clock,
            events: Arc::default(),
        }
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn record(&self, trace_id: &str, key: Option<&str>, kind: TraceKind) {
        let event = TraceEvent {
            trace_id: trace_id.to_owned(),
            key: key.map(str::to_owned),
            kind,
            at_ms: self.clock.now_ms(),
        };
        self.events.lock().unwrap().push(event);
    }

    pub fn snapshot(&self) -> Vec<TraceEvent> {
        self.events.lock().unwrap().clone()
    }

    pub fn for_trace(&self, trace_id: &str) -> Vec<TraceEvent> {
        self.events
            .lock()
            .unwrap()
            .iter()
            .filter(|e| e.trace_id == trace_id)
            .cloned()
            .collect()
    }

    /// First timestamp of `kind` for `trace_id`.
    pub fn first(&self, trace_id: &str, kind: TraceKind) -> Option<f64> {
        self.events
            .lock()
            .unwrap()
            .iter()
            .find(|e| e.trace_id == trace_id && e.kind == kind)
            .map(|e| e.at_ms)
    }

    pub fn clear(&self) {
        self.events.lock().unwrap().clear();
    }
}

pub fn ms(duration: Duration) -> f64 {
    duration.as_secs_f64() * 1e3
}
