//! Linear latency profiles for storage backends and node-to-node links.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use truffle_core::LinkModel;

pub const MIB: f64 = 1024.0 * 1024.0;

pub fn mib(bytes: u64) -> f64 {
    bytes as f64 / MIB
}

/// Wall-clock duration of `model_ms` simulated milliseconds.
pub fn scaled(model_ms: f64, scale: f64) -> Duration {
    Duration::from_secs_f64((model_ms * scale).max(0.0) / 1000.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    Get,
    Put,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackendLatencyProfile {
    pub base_ms: f64,
    pub per_mb_ms: f64,
}

impl BackendLatencyProfile {
    pub const fn new(base_ms: f64, per_mb_ms: f64) -> Self {
        Self { base_ms, per_mb_ms }
    }

    /// 11 + 10 × 128 = 1291 ms at 128 MiB.
    pub const fn direct_link() -> Self {
        Self::new(11.0, 10.0)
    }

    /// 16 + 12.25 × 128 = 1584 ms at 128 MiB.
    pub const fn kvs() -> Self {
        Self::new(16.0, 12.25)
    }

    /// About 2479 ms at 128 MiB.
    pub const fn object_store() -> Self {
        Self::new(34.0, 19.1)
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("base_ms", self.base_ms), ("per_mb_ms", self.per_mb_ms)] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// Model time to move `bytes` through this backend.
    pub fn transfer_ms(&self, bytes: u64) -> f64 {
        self.base_ms + self.per_mb_ms * mib(bytes)
    }

    /// Model time for one request. Writes are acknowledged after the fixed
    /// cost; only reads pay for moving the payload to the reader.
    pub fn latency_ms(&self, op: Operation, bytes: u64) -> f64 {
        match op {
            Operation::Get => self.transfer_ms(bytes),
            Operation::Put => self.base_ms,
        }
    }
}

/// Link cost charged by sidecars and the platform for inline payloads that
/// cross nodes.
#[derive(Debug, Clone, Copy)]
pub struct LinearLink {
    pub profile: BackendLatencyProfile,
    pub scale: f64,
}

impl LinkModel for LinearLink {
    fn transfer_delay(&self, bytes: u64) -> Duration {
        scaled(self.profile.transfer_ms(bytes), self.scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB128: u64 = 128 << 20;

    #[test]
    fn calibrated_profiles() {
        assert_eq!(BackendLatencyProfile::direct_link().transfer_ms(MB128), 1291.0);
        assert_eq!(BackendLatencyProfile::kvs().transfer_ms(MB128), 1584.0);
        let s3 = BackendLatencyProfile::object_store().transfer_ms(MB128);
        assert!((s3 - 2481.0).abs() < 5.0, "{s3}");
    }

    #[test]
    fn size_zero_is_base_only() {
        let p = BackendLatencyProfile::object_store();
        assert_eq!(p.latency_ms(Operation::Get, 0), 34.0);
        assert_eq!(p.latency_ms(Operation::Put, MB128), 34.0);
    }

    #[test]
    fn link_delay_is_scaled() {
        let link = LinearLink {
            profile: BackendLatencyProfile::direct_link(),
            scale: 0.1,
        };
        let d = link.transfer_delay(MB128);
        assert!((d.as_secs_f64() - 0.1291).abs() < 1e-9);
    }

    #[test]
    fn rejects_negative() {
        assert!(BackendLatencyProfile::new(-1.0, 0.0).validate().is_err());
        assert!(BackendLatencyProfile::new(0.0, f64::NAN).validate().is_err());
    }
}
