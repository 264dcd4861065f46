//! Node-local keyed payload store.
//!
//! Payloads are parked here between the moment they are fetched or received
//! from a peer and the moment the target function reads them. Every key
//! serves exactly one invocation, so reads remove the entry.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Notify;

pub const DEFAULT_CAPACITY_BYTES: u64 = 1 << 30;
pub const DEFAULT_TAKE_TIMEOUT: Duration = Duration::from_secs(30);
/// Only one buffer per node is supported; requests naming any other buffer
/// are rejected.
pub const DEFAULT_BUFFER_NAME: &str = "default";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BufferError {
    #[error("key {0} already exists")]
    Conflict(String),
    #[error("buffer full: {requested} bytes requested, {available} available")]
    Capacity { requested: u64, available: u64 },
    #[error("timed out waiting for key {0}")]
    Timeout(String),
    #[error("key {0} not found")]
    NotFound(String),
    #[error("fetch for key {key} failed: {reason}")]
    FetchFailed { key: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryState {
    Pending,
    Ready,
    Failed,
}

#[derive(Debug)]
enum Content {
    /// `announced` is false when the slot only exists because a reader
    /// arrived before the writer.
    Pending { announced: bool },
    Ready(Bytes),
    Failed(String),
}

#[derive(Debug)]
struct BufferEntry {
    content: Content,
    created_at: Instant,
    notify: Arc<Notify>,
}

impl BufferEntry {
    fn new(announced: bool) -> Self {
        Self {
            content: Content::Pending { announced },
            created_at: Instant::now(),
            notify: Arc::new(Notify::new()),
        }
    }

    fn state(&self) -> EntryState {
        match self.content {
            Content::Pending { .. } => EntryState::Pending,
            Content::Ready(_) => EntryState::Ready,
            Content::Failed(_) => EntryState::Failed,
        }
    }
}

#[derive(Debug, Default)]
struct Inner {
    entries: HashMap<String, BufferEntry>,
    /// Keys that were consumed or evicted, with the time they went away.
    retired: HashMap<String, Instant>,
    resident: u64,
}

/// Public view of an entry, without the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryInfo {
    pub key: String,
    pub state: EntryState,
    pub created_at: Instant,
    pub size_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct Buffer {
    inner: Arc<Mutex<Inner>>,
    capacity: u64,
}

impl Default for Buffer {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY_BYTES)
    }
}

impl Buffer {
    pub fn new(capacity_bytes: u64) -> Self {
        Self {
            inner: Arc::default(),
            capacity: capacity_bytes,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn resident_bytes(&self) -> u64 {
        self.inner.lock().unwrap().resident
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn status(&self, key: &str) -> Option<EntryState> {
        self.inner.lock().unwrap().entries.get(key).map(BufferEntry::state)
    }

    pub fn info(&self, key: &str) -> Option<EntryInfo> {
        let inner = self.inner.lock().unwrap();
        inner.entries.get(key).map(|e| EntryInfo {
            key: key.to_owned(),
            state: e.state(),
            created_at: e.created_at,
            size_bytes: match &e.content {
                Content::Ready(p) => p.len() as u64,
                _ => 0,
            },
        })
    }

    /// Creates a pending entry so readers can block before the writer arrives.
    pub fn announce(&self, key: &str) -> Result<(), BufferError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.retired.contains_key(key) {
            return Err(BufferError::Conflict(key.to_owned()));
        }
        match inner.entries.get_mut(key) {
            Some(BufferEntry {
                content: Content::Pending { announced },
                ..
            }) if !*announced => {
                *announced = true;
                Ok(())
            }
            Some(_) => Err(BufferError::Conflict(key.to_owned())),
            None => {
                inner.entries.insert(key.to_owned(), BufferEntry::new(true));
                Ok(())
            }
        }
    }

    /// Stores `payload` under `key` and wakes every reader blocked on it.
    pub fn put(&self, key: &str, payload: Bytes) -> Result<(), BufferError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.retired.contains_key(key) {
            return Err(BufferError::Conflict(key.to_owned()));
        }
        if let Some(entry) = inner.entries.get(key) {
            if !matches!(entry.content, Content::Pending { .. }) {
                return Err(BufferError::Conflict(key.to_owned()));
            }
        }
        let size = payload.len() as u64;
        let available = self.capacity.saturating_sub(inner.resident);
        if size > available {
            return Err(BufferError::Capacity {
                requested: size,
                available,
            });
        }
        inner.resident += size;
        let entry = inner
            .entries
            .entry(key.to_owned())
            .or_insert_with(|| BufferEntry::new(true));
        entry.content = Content::Ready(payload);
        entry.notify.notify_waiters();
        Ok(())
    }

    /// Poisons `key` so blocked and future readers fail fast instead of
    /// waiting for a payload that will never arrive.
    pub fn mark_failed(&self, key: &str, reason: impl Into<String>) -> Result<(), BufferError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.retired.contains_key(key) {
            return Err(BufferError::Conflict(key.to_owned()));
        }
        let entry = inner
            .entries
            .entry(key.to_owned())
            .or_insert_with(|| BufferEntry::new(true));
        if !matches!(entry.content, Content::Pending { .. }) {
            return Err(BufferError::Conflict(key.to_owned()));
        }
        entry.content = Content::Failed(reason.into());
        entry.notify.notify_waiters();
        Ok(())
    }

    /// Drops an entry that will not be read here (its payload went to
    /// another node). Returns whether anything was removed.
    pub fn discard(&self, key: &str) -> bool {
        let mut inner = self.inner.lock().unwrap();
        match inner.entries.remove(key) {
            Some(entry) => {
                if let Content::Ready(p) = &entry.content {
                    inner.resident -= p.len() as u64;
                }
                entry.notify.notify_waiters();
                true
            }
            None => false,
        }
    }

    /// Waits until `key` is ready, then removes and returns its payload.
    /// At most one caller ever receives a given payload.
    pub async fn take(&self, key: &str, timeout: Duration) -> Result<Bytes, BufferError> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let notify = {
                let mut inner = self.inner.lock().unwrap();
                match inner.entries.get(key).map(|e| &e.content) {
                    Some(Content::Ready(_)) => {
                        let entry = inner.entries.remove(key).expect("entry present");
                        let Content::Ready(payload) = entry.content else {
                            unreachable!()
                        };
                        inner.resident -= payload.len() as u64;
                        inner.retired.insert(key.to_owned(), Instant::now());
                        return Ok(payload);
                    }
                    Some(Content::Failed(_)) => {
                        let entry = inner.entries.remove(key).expect("entry present");
                        let Content::Failed(reason) = entry.content else {
                            unreachable!()
                        };
                        inner.retired.insert(key.to_owned(), Instant::now());
                        return Err(BufferError::FetchFailed {
                            key: key.to_owned(),
                            reason,
                        });
                    }
                    Some(Content::Pending { .. }) => inner.entries[key].notify.clone(),
                    None if inner.retired.contains_key(key) => {
                        return Err(BufferError::NotFound(key.to_owned()));
                    }
                    None => {
                        let entry = BufferEntry::new(false);
                        let notify = entry.notify.clone();
                        inner.entries.insert(key.to_owned(), entry);
                        notify
                    }
                }
            };
            let notified = notify.notified();
            tokio::pin!(notified);
            // Registering before re-checking closes the gap between the
            // state check above and the wait below.
            notified.as_mut().enable();
            if self.changed_since_check(key) {
                continue;
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return Err(BufferError::Timeout(key.to_owned()));
            }
        }
    }

    fn changed_since_check(&self, key: &str) -> bool {
        let inner = self.inner.lock().unwrap();
        !matches!(
            inner.entries.get(key).map(|e| &e.content),
            Some(Content::Pending { .. })
        )
    }

    /// Removes entries older than `max_age` and forgets retired keys of the
    /// same age. Returns the number of entries removed.
    pub fn evict_expired(&self, max_age: Duration) -> usize {
        let now = Instant::now();
        let mut inner = self.inner.lock().unwrap();
        let expired: Vec<String> = inner
            .entries
            .iter()
            .filter(|(_, e)| now.duration_since(e.created_at) > max_age)
            .map(|(k, _)| k.clone())
            .collect();
        for key in &expired {
            let entry = inner.entries.remove(key).expect("entry present");
            if let Content::Ready(p) = &entry.content {
                inner.resident -= p.len() as u64;
            }
            inner.retired.insert(key.clone(), now);
            entry.notify.notify_waiters();
        }
        inner.retired.retain(|_, at| now.duration_since(*at) <= max_age);
        expired.len()
    }
}
