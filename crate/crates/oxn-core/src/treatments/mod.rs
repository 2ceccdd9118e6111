//! The treatment library and the fault scheduler.
//!
//! Treatments are controlled changes to the system under experiment behind
//! one common interface, so custom treatments can be added alongside the
//! built-in set. Instrumentation treatments patch the service model before
//! startup; fault treatments mutate the running system and are reverted
//! after their duration.

mod library;
pub mod schedule;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use schedule::{
    plan_schedule, FaultScheduler, ScheduleEntry, ScheduleError, TreatmentSchedule,
};

use crate::config::{Phase, TreatmentSpec};
use crate::orchestrator::runtime::RuntimeApi;

#[derive(Debug, Error)]
pub enum TreatmentError {
    #[error("precondition failed: {}", violations.join("; "))]
    PreconditionFailed { violations: Vec<String> },
    #[error("apply failed: {0}")]
    ApplyFailed(String),
    #[error("revert failed: {0}")]
    RevertFailed(String),
    #[error("treatment cannot be reverted")]
    NonRevertible,
}

/// Common interface every treatment implements.
pub trait Treatment: Send + Sync {
    fn spec(&self) -> &TreatmentSpec;

    /// Checks that must hold before apply; violations abort the run with
    /// a clear message instead of silently no-opping.
    fn preconditions(&self, rt: &dyn RuntimeApi) -> Vec<String>;

    fn apply(&self, rt: &dyn RuntimeApi) -> Result<(), TreatmentError>;

    fn revert(&self, rt: &dyn RuntimeApi) -> Result<(), TreatmentError>;

    fn is_revertible(&self) -> bool {
        self.spec().action.is_revertible()
    }
}

/// Construct the built-in treatment for a parsed spec.
pub fn build_treatment(spec: &TreatmentSpec) -> Box<dyn Treatment> {
    library::build(spec)
}

/// Outcome of one applied treatment, timestamps taken from the journal.
/// These records are the ground truth that labels telemetry rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentRecord {
    pub treatment: String,
    pub action: String,
    pub phase: Phase,
    pub service: String,
    pub params: BTreeMap<String, serde_json::Value>,
    /// Journaled apply timestamp, epoch ms.
    pub start_ms: u64,
    /// Journaled revert timestamp (or end of the fault window for
    /// non-revertible actions), epoch ms.
    pub end_ms: u64,
    pub status: TreatmentStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreatmentStatus {
    /// In effect; terminal state for non-revertible actions.
    Applied,
    /// Applied and cleanly reverted.
    Reverted,
    /// Apply or revert failed; the run is tainted.
    Failed,
    /// Never applied (e.g. its target was killed by an earlier treatment).
    Skipped,
}

impl TreatmentRecord {
    pub fn window(&self) -> (u64, u64) {
        (self.start_ms, self.end_ms)
    }

    /// Whether this record defines a labeling window.
    pub fn labels_rows(&self) -> bool {
        self.phase == Phase::Fault
            && matches!(
                self.status,
                TreatmentStatus::Applied | TreatmentStatus::Reverted
            )
    }
}

pub(crate) fn record_params(spec: &TreatmentSpec) -> BTreeMap<String, serde_json::Value> {
    spec.action
        .to_params()
        .into_iter()
        .map(|(k, v)| (k, yaml_to_json(v)))
        .collect()
}

pub(crate) fn yaml_to_json(v: serde_yaml::Value) -> serde_json::Value {
    match v {
        serde_yaml::Value::Null => serde_json::Value::Null,
        serde_yaml::Value::Bool(b) => serde_json::Value::Bool(b),
        serde_yaml::Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                serde_json::Value::from(u)
            } else if let Some(i) = n.as_i64() {
                serde_json::Value::from(i)
            } else {
                serde_json::Value::from(n.as_f64().unwrap_or(f64::NAN))
            }
        }
        serde_yaml::Value::String(s) => serde_json::Value::String(s),
        serde_yaml::Value::Sequence(seq) => {
            serde_json::Value::Array(seq.into_iter().map(yaml_to_json).collect())
        }
        serde_yaml::Value::Mapping(map) => serde_json::Value::Object(
            map.into_iter()
                .map(|(k, v)| {
                    let key = match k {
                        serde_yaml::Value::String(s) => s,
                        other => serde_yaml::to_string(&other)
                            .unwrap_or_default()
                            .trim()
                            .to_string(),
                    };
                    (key, yaml_to_json(v))
                })
                .collect(),
        ),
        serde_yaml::Value::Tagged(t) => yaml_to_json(t.value),
    }
}
