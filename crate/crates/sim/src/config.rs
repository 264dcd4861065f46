//! Cluster and workflow description, loadable from TOML.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use truffle_core::{PhaseBreakdown, StorageKind};

use crate::profile::BackendLatencyProfile;

pub const DEFAULT_ALPHA_MS: f64 = 20.0;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("workflow has no functions")]
    Empty,
    #[error("duplicate function {0:?}")]
    Duplicate(String),
    #[error("{function}: {field} must be a finite non-negative number, got {value}")]
    BadDuration {
        function: String,
        field: &'static str,
        value: f64,
    },
    #[error("{function}: unknown downstream function {target:?}")]
    UnknownDownstream { function: String, target: String },
    #[error("workflow must have exactly one entry function, found {0:?}")]
    Entry(Vec<String>),
    #[error("workflow contains a cycle through {0:?}")]
    Cycle(String),
    #[error("chain topology allows at most one downstream per function; {0:?} has more")]
    NotAChain(String),
    #[error("fan-out/fan-in topology needs a single sink, found {0:?}")]
    Sink(Vec<String>),
    #[error("{placements} distinct placements cannot be satisfied by {nodes} nodes")]
    Placement { placements: usize, nodes: usize },
    #[error("scale_factor must be positive and finite, got {0}")]
    Scale(f64),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    #[default]
    Chain,
    FanOutFanIn,
}

/// Where a function expects its input. Functions without a binding use the
/// workflow's `storage_kind`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputBinding {
    pub kind: StorageKind,
    #[serde(default)]
    pub bucket: Option<String>,
    #[serde(default)]
    pub credentials_ref: Option<String>,
}

impl InputBinding {
    pub fn of(kind: StorageKind) -> Self {
        Self {
            kind,
            bucket: None,
            credentials_ref: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub name: String,
    #[serde(default)]
    pub cold_start_ms: f64,
    #[serde(default)]
    pub added_delay_ms: f64,
    #[serde(default)]
    pub compute_ms: f64,
    /// Node affinity label. Functions sharing a label share a node; a
    /// function without one gets a node of its own.
    #[serde(default)]
    pub placement: Option<String>,
    #[serde(default)]
    pub downstream: Vec<String>,
    #[serde(default)]
    pub input: Option<InputBinding>,
    /// Kept running for the whole life of the cluster, like a streaming
    /// source or a client-facing entry point.
    #[serde(default)]
    pub warm: bool,
}

impl FunctionSpec {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            cold_start_ms: 0.0,
            added_delay_ms: 0.0,
            compute_ms: 0.0,
            placement: None,
            downstream: Vec::new(),
            input: None,
            warm: false,
        }
    }

    pub fn cold_start(mut self, ms: f64) -> Self {
        self.cold_start_ms = ms;
        self
    }

    pub fn compute(mut self, ms: f64) -> Self {
        self.compute_ms = ms;
        self
    }

    pub fn placed(mut self, label: &str) -> Self {
        self.placement = Some(label.to_owned());
        self
    }

    pub fn calls(mut self, targets: &[&str]) -> Self {
        self.downstream = targets.iter().map(|t| t.to_string()).collect();
        self
    }

    pub fn warm(mut self) -> Self {
        self.warm = true;
        self
    }

    pub fn placement_label(&self) -> &str {
        self.placement.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowSpec {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default = "default_kind")]
    pub storage_kind: StorageKind,
    pub functions: Vec<FunctionSpec>,
}

fn default_name() -> String {
    "workflow".to_owned()
}

fn default_kind() -> StorageKind {
    StorageKind::Direct
}

impl WorkflowSpec {
    pub fn function(&self, name: &str) -> Option<&FunctionSpec> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn binding(&self, function: &FunctionSpec) -> InputBinding {
        function
            .input
            .clone()
            .unwrap_or_else(|| InputBinding::of(self.storage_kind))
    }

    /// The single function nothing else calls.
    pub fn entry(&self) -> &FunctionSpec {
        let called: HashSet<&str> = self
            .functions
            .iter()
            .flat_map(|f| f.downstream.iter().map(String::as_str))
            .collect();
        self.functions
            .iter()
            .find(|f| !called.contains(f.name.as_str()))
            .expect("validated workflow has an entry")
    }

    /// Distinct placement labels in order of first appearance.
    pub fn placements(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for f in &self.functions {
            let label = f.placement_label();
            if !out.iter().any(|l| l == label) {
                out.push(label.to_owned());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.functions.is_empty() {
            return Err(ConfigError::Empty);
        }
        let mut names = HashSet::new();
        for f in &self.functions {
            if f.name.is_empty() {
                return Err(ConfigError::Invalid("function name must not be empty".into()));
            }
            if !names.insert(f.name.as_str()) {
                return Err(ConfigError::Duplicate(f.name.clone()));
            }
            for (field, value) in [
                ("cold_start_ms", f.cold_start_ms),
                ("added_delay_ms", f.added_delay_ms),
                ("compute_ms", f.compute_ms),
            ] {
                if !value.is_finite() || value < 0.0 {
                    return Err(ConfigError::BadDuration {
                        function: f.name.clone(),
                        field,
                        value,
                    });
                }
            }
        }
        for f in &self.functions {
            for t in &f.downstream {
                if !names.contains(t.as_str()) {
                    return Err(ConfigError::UnknownDownstream {
                        function: f.name.clone(),
                        target: t.clone(),
                    });
                }
            }
        }

        let called: HashSet<&str> = self
            .functions
            .iter()
            .flat_map(|f| f.downstream.iter().map(String::as_str))
            .collect();
        let entries: Vec<String> = self
            .functions
            .iter()
            .filter(|f| !called.contains(f.name.as_str()))
            .map(|f| f.name.clone())
            .collect();
        if entries.len() != 1 {
            return Err(ConfigError::Entry(entries));
        }
        self.check_acyclic()?;

        match self.topology {
            Topology::Chain => {
                if let Some(f) = self.functions.iter().find(|f| f.downstream.len() > 1) {
                    return Err(ConfigError::NotAChain(f.name.clone()));
                }
            }
            Topology::FanOutFanIn => {
                let sinks: Vec<String> = self
                    .functions
                    .iter()
                    .filter(|f| f.downstream.is_empty())
                    .map(|f| f.name.clone())
                    .collect();
                if sinks.len() != 1 {
                    return Err(ConfigError::Sink(sinks));
                }
            }
        }
        Ok(())
    }

    fn check_acyclic(&self) -> Result<(), ConfigError> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Open,
            Done,
        }
        fn visit<'a>(
            name: &'a str,
            edges: &HashMap<&'a str, &'a [String]>,
            marks: &mut HashMap<&'a str, Mark>,
        ) -> Result<(), ConfigError> {
            match marks.get(name) {
                Some(Mark::Done) => return Ok(()),
                Some(Mark::Open) => return Err(ConfigError::Cycle(name.to_owned())),
                None => {}
            }
            marks.insert(name, Mark::Open);
            for next in edges[name] {
                visit(next, edges, marks)?;
            }
            marks.insert(name, Mark::Done);
            Ok(())
        }
        let edges: HashMap<&str, &[String]> = self
            .functions
            .iter()
            .map(|f| (f.name.as_str(), f.downstream.as_slice()))
            .collect();
        let mut marks = HashMap::new();
        for f in &self.functions {
            visit(&f.name, &edges, &mut marks)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backends {
    /// Node-to-node link used for inline payloads.
    #[serde(default = "BackendLatencyProfile::direct_link")]
    pub direct: BackendLatencyProfile,
    #[serde(default = "BackendLatencyProfile::kvs")]
    pub kvs: BackendLatencyProfile,
    #[serde(default = "BackendLatencyProfile::object_store")]
    pub object_store: BackendLatencyProfile,
}

impl Default for Backends {
    fn default() -> Self {
        Self {
            direct: BackendLatencyProfile::direct_link(),
            kvs: BackendLatencyProfile::kvs(),
            object_store: BackendLatencyProfile::object_store(),
        }
    }
}

impl Backends {
    pub fn for_kind(&self, kind: StorageKind) -> BackendLatencyProfile {
        match kind {
            StorageKind::Direct => self.direct,
            StorageKind::Kvs => self.kvs,
            StorageKind::ObjectStore => self.object_store,
        }
    }
}

/// Wall-clock limits, not scaled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Timeouts {
    pub scheduling_ms: u64,
    pub input_ms: u64,
    pub request_ms: u64,
}

impl Default for Timeouts {
    fn default() -> Self {
        Self {
            scheduling_ms: 120_000,
            input_ms: 60_000,
            request_ms: 300_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default = "default_scale")]
    pub scale_factor: f64,
    /// Scheduling latency before a cold function is placed.
    #[serde(default = "default_alpha")]
    pub alpha_ms: f64,
    #[serde(default)]
    pub backends: Backends,
    /// Bearer secrets for object-store buckets, by credentials reference.
    #[serde(default)]
    pub credentials: HashMap<String, String>,
    #[serde(default)]
    pub timeouts: Timeouts,
    #[serde(flatten)]
    pub workflow: WorkflowSpec,
}

fn default_nodes() -> usize {
    2
}

fn default_scale() -> f64 {
    1.0
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA_MS
}

impl ClusterConfig {
    pub fn new(workflow: WorkflowSpec, nodes: usize) -> Self {
        Self {
            nodes,
            scale_factor: 1.0,
            alpha_ms: DEFAULT_ALPHA_MS,
            backends: Backends::default(),
            credentials: HashMap::new(),
            timeouts: Timeouts::default(),
            workflow,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.scale_factor.is_finite() || self.scale_factor <= 0.0 {
            return Err(ConfigError::Scale(self.scale_factor));
        }
        if !self.alpha_ms.is_finite() || self.alpha_ms < 0.0 {
            return Err(ConfigError::Invalid(format!(
                "alpha_ms must be non-negative, got {}",
                self.alpha_ms
            )));
        }
        for (name, p) in [
            ("direct", self.backends.direct),
            ("kvs", self.backends.kvs),
            ("object_store", self.backends.object_store),
        ] {
            p.validate().map_err(|e| ConfigError::Invalid(format!("backends.{name}: {e}")))?;
        }
        self.workflow.validate()?;
        let placements = self.workflow.placements().len();
        if placements > self.nodes {
            return Err(ConfigError::Placement {
                placements,
                nodes: self.nodes,
            });
        }
        Ok(())
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale_factor = scale;
        self
    }

    /// Sets the added cold-start delay on every function that can go cold.
    pub fn with_added_delay(mut self, delay_ms: f64) -> Self {
        for f in self.workflow.functions.iter_mut().filter(|f| !f.warm) {
            f.added_delay_ms = delay_ms;
        }
        self
    }
}

/// Measured 128 MiB phase timings for one stage reading from `kind`: the
/// defaults the presets and backend profiles are calibrated to.
pub fn reference_timings(kind: StorageKind) -> PhaseBreakdown {
    let (sched, cold, transfer, compute) = match kind {
        StorageKind::Direct => (20, 2375, 1291, 15),
        StorageKind::Kvs => (16, 2033, 1584, 12),
        StorageKind::ObjectStore => (34, 1660, 2481, 15),
    };
    PhaseBreakdown::with_cold_start(sched, cold, transfer, compute).expect("non-negative")
}

/// Warm producer on one node feeding a cold consumer on another. The
/// consumer uses the reference timings for `kind`.
pub fn chain(kind: StorageKind) -> ClusterConfig {
    let t = reference_timings(kind);
    let workflow = WorkflowSpec {
        name: "chain".into(),
        topology: Topology::Chain,
        storage_kind: kind,
        functions: vec![
            FunctionSpec::new("producer").warm().placed("edge").calls(&["consumer"]),
            FunctionSpec::new("consumer")
                .cold_start(t.beta_ms() as f64)
                .compute(t.gamma_ms() as f64)
                .placed("cloud"),
        ],
    };
    let mut config = ClusterConfig::new(workflow, 2);
    config.alpha_ms = t.alpha_ms() as f64;
    config
}

/// Streaming source fanning out to two decoders that both feed one
/// recognition stage.
pub fn video(kind: StorageKind) -> ClusterConfig {
    let t = reference_timings(kind);
    let cold = t.beta_ms() as f64;
    let workflow = WorkflowSpec {
        name: "video".into(),
        topology: Topology::FanOutFanIn,
        storage_kind: kind,
        functions: vec![
            FunctionSpec::new("streaming")
                .warm()
                .placed("camera")
                .calls(&["decoder-1", "decoder-2"]),
            FunctionSpec::new("decoder-1")
                .cold_start(cold)
                .compute(40.0)
                .placed("decode")
                .calls(&["recognition"]),
            FunctionSpec::new("decoder-2")
                .cold_start(cold)
                .compute(40.0)
                .placed("decode")
                .calls(&["recognition"]),
            FunctionSpec::new("recognition")
                .cold_start(cold)
                .compute(120.0)
                .placed("inference"),
        ],
    };
    let mut config = ClusterConfig::new(workflow, 3);
    config.alpha_ms = t.alpha_ms() as f64;
    config
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for kind in StorageKind::ALL {
            chain(kind).validate().unwrap();
            video(kind).validate().unwrap();
        }
        assert_eq!(chain(StorageKind::Direct).workflow.placements().len(), 2);
        assert_eq!(video(StorageKind::Direct).workflow.placements().len(), 3);
        assert_eq!(video(StorageKind::Kvs).workflow.entry().name, "streaming");
    }

    #[test]
    fn three_placements_on_two_nodes() {
        let mut c = video(StorageKind::Direct);
        c.nodes = 2;
        assert!(matches!(
            c.validate(),
            Err(ConfigError::Placement { placements: 3, nodes: 2 })
        ));
    }

    #[test]
    fn rejects_bad_workflows() {
        let mut c = chain(StorageKind::Direct);
        c.workflow.functions[0].downstream.push("ghost".into());
        assert!(matches!(c.validate(), Err(ConfigError::UnknownDownstream { .. })));

        let mut c = chain(StorageKind::Direct);
        c.workflow.functions[1].downstream.push("producer".into());
        assert!(matches!(c.validate(), Err(ConfigError::Entry(_))));

        let mut c = video(StorageKind::Direct);
        c.workflow.topology = Topology::Chain;
        assert!(matches!(c.validate(), Err(ConfigError::NotAChain(_))));

        let mut c = chain(StorageKind::Direct);
        c.workflow.functions[1].compute_ms = -1.0;
        assert!(matches!(c.validate(), Err(ConfigError::BadDuration { .. })));

        let mut c = chain(StorageKind::Direct);
        c.workflow.functions[0].downstream.push("producer".into());
        assert!(c.validate().is_err());

        let mut c = video(StorageKind::Direct);
        c.workflow.functions[1].downstream.clear();
        assert!(matches!(c.validate(), Err(ConfigError::Sink(_))));
    }

    #[test]
    fn parses_toml() {
        let text = r#"
            nodes = 2
            scale_factor = 0.1
            topology = "chain"
            storage_kind = "kvs"

            [backends.kvs]
            base_ms = 16
            per_mb_ms = 12.25

            [[functions]]
            name = "a"
            warm = true
            placement = "n0"
            downstream = ["b"]

            [[functions]]
            name = "b"
            cold_start_ms = 2033
            added_delay_ms = 500
            compute_ms = 12
            placement = "n1"
        "#;
        let c = ClusterConfig::from_toml(text).unwrap();
        assert_eq!(c.nodes, 2);
        assert_eq!(c.scale_factor, 0.1);
        assert_eq!(c.alpha_ms, DEFAULT_ALPHA_MS);
        assert_eq!(c.workflow.storage_kind, StorageKind::Kvs);
        assert_eq!(c.workflow.functions[1].added_delay_ms, 500.0);
        assert_eq!(c.backends.object_store, BackendLatencyProfile::object_store());
        assert_eq!(c.workflow.binding(&c.workflow.functions[1]).kind, StorageKind::Kvs);
    }

    #[test]
    fn added_delay_skips_warm_functions() {
        let c = chain(StorageKind::Direct).with_added_delay(2000.0);
        assert_eq!(c.workflow.functions[0].added_delay_ms, 0.0);
        assert_eq!(c.workflow.functions[1].added_delay_ms, 2000.0);
    }
}
