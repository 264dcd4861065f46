//! Analytic latency model for a function invocation whose cold start and
//! input transfer may run concurrently.
//!
//! All durations are integer milliseconds. Functions here are pure and are
//! used as the oracle the simulated cluster is checked against.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("{field} must be non-negative, got {value}")]
    Negative { field: &'static str, value: i64 },
    #[error("workflow has no stages")]
    EmptyWorkflow,
}

fn non_negative(field: &'static str, value: i64) -> Result<i64, ModelError> {
    if value < 0 {
        Err(ModelError::Negative { field, value })
    } else {
        Ok(value)
    }
}

/// Per-invocation phase durations.
///
/// `scheduling` is the time to place the function on a host, `infra_setup`
/// and `runtime_startup` together form the cold start, `transfer` is the
/// time to move the input to the function's node and `compute` is the
/// function body itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawPhases")]
pub struct PhaseBreakdown {
    alpha_ms: i64,
    upsilon_ms: i64,
    eta_ms: i64,
    delta_ms: i64,
    gamma_ms: i64,
}

#[derive(Deserialize)]
struct RawPhases {
    alpha_ms: i64,
    upsilon_ms: i64,
    eta_ms: i64,
    delta_ms: i64,
    gamma_ms: i64,
}

impl TryFrom<RawPhases> for PhaseBreakdown {
    type Error = ModelError;

    fn try_from(r: RawPhases) -> Result<Self, Self::Error> {
        PhaseBreakdown::new(r.alpha_ms, r.upsilon_ms, r.eta_ms, r.delta_ms, r.gamma_ms)
    }
}

impl PhaseBreakdown {
    pub fn new(
        alpha_ms: i64,
        upsilon_ms: i64,
        eta_ms: i64,
        delta_ms: i64,
        gamma_ms: i64,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            alpha_ms: non_negative("alpha_ms", alpha_ms)?,
            upsilon_ms: non_negative("upsilon_ms", upsilon_ms)?,
            eta_ms: non_negative("eta_ms", eta_ms)?,
            delta_ms: non_negative("delta_ms", delta_ms)?,
            gamma_ms: non_negative("gamma_ms", gamma_ms)?,
        })
    }

    /// Phases with the whole cold start attributed to infrastructure setup,
    /// which is how single cold-start measurements are recorded.
    pub fn with_cold_start(
        scheduling_ms: i64,
        cold_start_ms: i64,
        transfer_ms: i64,
        compute_ms: i64,
    ) -> Result<Self, ModelError> {
        Self::new(scheduling_ms, cold_start_ms, 0, transfer_ms, compute_ms)
    }

    pub fn alpha_ms(&self) -> i64 {
        self.alpha_ms
    }

    pub fn upsilon_ms(&self) -> i64 {
        self.upsilon_ms
    }

    pub fn eta_ms(&self) -> i64 {
        self.eta_ms
    }

    pub fn delta_ms(&self) -> i64 {
        self.delta_ms
    }

    pub fn gamma_ms(&self) -> i64 {
        self.gamma_ms
    }

    /// Cold start: infrastructure setup plus runtime startup.
    pub fn beta_ms(&self) -> i64 {
        self.upsilon_ms + self.eta_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImprovementReport {
    pub phi_ms: i64,
    pub delta_improvement_ms: i64,
    pub tau_baseline_ms: i64,
    pub tau_truffle_ms: i64,
}

pub fn cold_start(upsilon_ms: i64, eta_ms: i64) -> Result<i64, ModelError> {
    Ok(non_negative("upsilon_ms", upsilon_ms)? + non_negative("eta_ms", eta_ms)?)
}

/// Duration of the overlapped cold-start/transfer phase: the longer of the two.
pub fn overlap_phase(beta_ms: i64, delta_ms: i64) -> Result<i64, ModelError> {
    Ok(non_negative("beta_ms", beta_ms)?.max(non_negative("delta_ms", delta_ms)?))
}

pub fn end_to_end(phases: &PhaseBreakdown, overlapped: bool) -> i64 {
    let beta = phases.beta_ms();
    let middle = if overlapped {
        beta.max(phases.delta_ms)
    } else {
        beta + phases.delta_ms
    };
    phases.alpha_ms + middle + phases.gamma_ms
}

/// Time saved by overlapping: `(beta + delta) - max(beta, delta)`.
pub fn improvement(beta_ms: i64, delta_ms: i64) -> Result<i64, ModelError> {
    let phi = overlap_phase(beta_ms, delta_ms)?;
    Ok(beta_ms + delta_ms - phi)
}

/// Sum over stages of `alpha + max(beta, delta) + gamma`.
pub fn workflow_objective(stages: &[PhaseBreakdown]) -> Result<i64, ModelError> {
    if stages.is_empty() {
        return Err(ModelError::EmptyWorkflow);
    }
    Ok(stages.iter().map(|s| end_to_end(s, true)).sum())
}

pub fn improvement_report(phases: &PhaseBreakdown) -> ImprovementReport {
    let beta = phases.beta_ms();
    ImprovementReport {
        phi_ms: beta.max(phases.delta_ms),
        delta_improvement_ms: beta.min(phases.delta_ms),
        tau_baseline_ms: end_to_end(phases, false),
        tau_truffle_ms: end_to_end(phases, true),
    }
}
