//! Registry of function placements built from orchestrator lifecycle events.
//!
//! The watcher answers two questions for the ingress: is a function already
//! live, and on which host did the scheduler place it.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::oneshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Scheduled,
    Running,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulingEvent {
    pub function_name: String,
    pub host_address: String,
    pub kind: EventKind,
    pub at_ms: f64,
}

impl SchedulingEvent {
    pub fn new(function_name: &str, host_address: &str, kind: EventKind, at_ms: f64) -> Self {
        Self {
            function_name: function_name.to_owned(),
            host_address: host_address.to_owned(),
            kind,
            at_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WatcherError {
    #[error("no host assigned to {0} before the deadline")]
    SchedulingTimeout(String),
    #[error("{function}: {got:?} event after {previous:?}")]
    OutOfOrder {
        function: String,
        previous: Option<EventKind>,
        got: EventKind,
    },
    #[error("{0}: scheduled event without a host")]
    MissingHost(String),
}

/// Something that pushes lifecycle events into watchers, e.g. a simulated
/// orchestrator or an adapter over a live cluster API.
pub trait EventFeed {
    fn subscribe(&self, watcher: Watcher);
}

#[derive(Debug)]
struct Placement {
    last: EventKind,
    host: String,
}

#[derive(Debug, Default)]
struct Inner {
    registry: HashMap<String, Placement>,
    waiters: HashMap<String, Vec<oneshot::Sender<String>>>,
    rejected: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Watcher {
    inner: Arc<Mutex<Inner>>,
}

impl Watcher {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one event. Events must follow scheduled → running →
    /// terminated per function; a function may be scheduled again after it
    /// terminated.
    pub fn ingest_event(&self, event: SchedulingEvent) -> Result<(), WatcherError> {
        let mut inner = self.inner.lock().unwrap();
        let previous = inner.registry.get(&event.function_name).map(|p| p.last);
        let allowed = matches!(
            (previous, event.kind),
            (None | Some(EventKind::Terminated), EventKind::Scheduled)
                | (Some(EventKind::Scheduled), EventKind::Running)
                | (Some(EventKind::Scheduled | EventKind::Running), EventKind::Terminated)
        );
        if !allowed {
            inner.rejected += 1;
            return Err(WatcherError::OutOfOrder {
                function: event.function_name,
                previous,
                got: event.kind,
            });
        }
        if event.kind == EventKind::Scheduled && event.host_address.is_empty() {
            inner.rejected += 1;
            return Err(WatcherError::MissingHost(event.function_name));
        }

        let host = match inner.registry.get(&event.function_name) {
            Some(p) if event.host_address.is_empty() => p.host.clone(),
            _ => event.host_address.clone(),
        };
        inner.registry.insert(
            event.function_name.clone(),
            Placement {
                last: event.kind,
                host: host.clone(),
            },
        );
        if event.kind != EventKind::Terminated {
            if let Some(waiters) = inner.waiters.remove(&event.function_name) {
                for waiter in waiters {
                    let _ = waiter.send(host.clone());
                }
            }
        }
        Ok(())
    }

    /// True iff the latest event for the function is scheduled or running.
    pub fn is_running(&self, function_name: &str) -> bool {
        self.live_host(function_name).is_some()
    }

    pub fn live_host(&self, function_name: &str) -> Option<String> {
        let inner = self.inner.lock().unwrap();
        inner
            .registry
            .get(function_name)
            .filter(|p| p.last != EventKind::Terminated)
            .map(|p| p.host.clone())
    }

    /// Resolves with the host of `target_function` as soon as it is known:
    /// immediately if it is already live, otherwise on the first scheduled
    /// or running event for it.
    pub async fn wait_for_host(
        &self,
        target_function: &str,
        timeout: Duration,
    ) -> Result<String, WatcherError> {
        let rx = {
            let mut inner = self.inner.lock().unwrap();
            if let Some(p) = inner
                .registry
                .get(target_function)
                .filter(|p| p.last != EventKind::Terminated)
            {
                return Ok(p.host.clone());
            }
            let (tx, rx) = oneshot::channel();
            let waiters = inner.waiters.entry(target_function.to_owned()).or_default();
            waiters.retain(|w| !w.is_closed());
            waiters.push(tx);
            rx
        };
        match tokio::time::timeout(timeout, rx).await {
            Ok(Ok(host)) => Ok(host),
            _ => Err(WatcherError::SchedulingTimeout(target_function.to_owned())),
        }
    }

    /// Number of events rejected for violating the lifecycle order.
    pub fn rejected_count(&self) -> u64 {
        self.inner.lock().unwrap().rejected
    }
}
