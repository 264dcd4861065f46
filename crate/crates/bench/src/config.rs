//! Experiment grid definitions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use truffle_core::StorageKind;
use truffle_sim::config::{Backends, Timeouts};
use truffle_sim::{chain, video, ClusterConfig, Mode};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed experiment config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid experiment config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Cluster(#[from] truffle_sim::ConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workload {
    Chain,
    Video,
}

impl Workload {
    pub fn as_str(self) -> &'static str {
        match self {
            Workload::Chain => "chain",
            Workload::Video => "video",
        }
    }
}

/// Cluster settings that replace the workload preset's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterOverrides {
    pub nodes: Option<usize>,
    pub alpha_ms: Option<f64>,
    pub backends: Option<Backends>,
    pub timeouts: Option<Timeouts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub workload: Workload,
    pub storage_kind: StorageKind,
    pub input_sizes_mb: Vec<f64>,
    #[serde(default = "default_delays")]
    pub added_delays_ms: Vec<f64>,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    #[serde(default = "default_scale")]
    pub scale_factor: f64,
    #[serde(default = "default_output")]
    pub output_path: PathBuf,
    /// Unrecorded runs before each point's repetitions.
    #[serde(default)]
    pub warmup: u32,
    #[serde(default)]
    pub cluster: ClusterOverrides,
}

fn default_delays() -> Vec<f64> {
    vec![0.0]
}

fn default_repetitions() -> u32 {
    1
}

fn default_modes() -> Vec<Mode> {
    Mode::ALL.to_vec()
}

fn default_scale() -> f64 {
    1.0
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentConfig {
    pub fn new(workload: Workload, storage_kind: StorageKind, input_sizes_mb: Vec<f64>) -> Self {
        Self {
            workload,
            storage_kind,
            input_sizes_mb,
            added_delays_ms: default_delays(),
            repetitions: default_repetitions(),
            modes: default_modes(),
            scale_factor: default_scale(),
            output_path: default_output(),
            warmup: 0,
            cluster: ClusterOverrides::default(),
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
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_owned()));
        if self.repetitions < 1 {
            return invalid("repetitions must be at least 1");
        }
        if self.input_sizes_mb.is_empty() {
            return invalid("input_sizes_mb is empty");
        }
        if self.added_delays_ms.is_empty() {
            return invalid("added_delays_ms is empty");
        }
        if self.modes.is_empty() {
            return invalid("modes is empty");
        }
        if self
            .input_sizes_mb
            .iter()
            .chain(&self.added_delays_ms)
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return invalid("sizes and delays must be finite and non-negative");
        }
        self.cluster_config()?;
        Ok(())
    }

    /// The workload preset for `storage_kind` with the overrides applied.
    pub fn cluster_config(&self) -> Result<ClusterConfig, ConfigError> {
        let mut c = match self.workload {
            Workload::Chain => chain(self.storage_kind),
            Workload::Video => video(self.storage_kind),
        };
        c.scale_factor = self.scale_factor;
        let o = &self.cluster;
        if let Some(n) = o.nodes {
            c.nodes = n;
        }
        if let Some(a) = o.alpha_ms {
            c.alpha_ms = a;
        }
        if let Some(b) = &o.backends {
            c.backends = b.clone();
        }
        if let Some(t) = o.timeouts {
            c.timeouts = t;
        }
        c.validate()?;
        Ok(c)
    }

    /// Modes in canonical order, without duplicates.
    pub fn modes(&self) -> Vec<Mode> {
        Mode::ALL.into_iter().filter(|m| self.modes.contains(m)).collect()
    }
}
