//! Data-passing sidecar that overlaps input transfer with function cold
//! starts.
//!
//! Two paths move data while a target function is still starting:
//!
//! - **prefetch**: the ingress hands the invocation's storage descriptor to
//!   the [`engine::DataEngine`], which fetches the input at the same time as
//!   the platform schedules and boots the function.
//! - **cold-start pass**: for inline payloads, [`pass::ColdStartPass`] waits
//!   for the [`watcher::Watcher`] to learn the target's host and pushes the
//!   payload into that node's [`buffer::Buffer`].
//!
//! In both cases the platform receives a reference key instead of the
//! payload, and the function redeems it against its local sidecar. Hot
//! functions are proxied unchanged.
//!
//! [`model`] holds the analytic latency model the simulator is checked
//! against.

pub mod buffer;
pub mod clock;
pub mod engine;
pub mod ingress;
pub mod model;
pub mod pass;
pub mod pool;
pub mod storage;
pub mod watcher;
pub mod wire;

pub use buffer::{Buffer, BufferError, EntryState};
pub use clock::{Clock, TraceEvent, TraceKind, TraceLog};
pub use engine::DataEngine;
pub use ingress::{Sidecar, SidecarConfig, SidecarHandle};
pub use model::{ImprovementReport, ModelError, PhaseBreakdown};
pub use pass::{ColdStartPass, LinkModel, NoDelay, PassOutcome, TransferReport};
pub use storage::{AdapterRegistry, Credentials, FetchError, Locator, StorageDescriptor, StorageKind};
pub use watcher::{EventKind, SchedulingEvent, Watcher, WatcherError};
pub use wire::RequestEnvelope;
