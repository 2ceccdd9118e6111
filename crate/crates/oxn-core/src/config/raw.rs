//! Raw serde model mirroring the experiment file byte layout.
//!
//! Everything here is strict: unknown keys are schema errors. Conversion
//! into the typed domain model (and all semantic checks) happens in the
//! parent module.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_yaml::Value;

use crate::time::DurationSpec;

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub(super) struct RawFile {
    pub experiment: RawExperiment,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub(super) struct RawExperiment {
    pub responses: Vec<BTreeMap<String, RawResponse>>,
    pub treatments: Vec<BTreeMap<String, RawTreatment>>,
    pub sue: RawSue,
    pub loadgen: RawLoadgen,
    #[serde(default, skip_serializing_if = "is_false")]
    pub baseline: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<RawDetection>,
}

fn is_false(b: &bool) -> bool {
    !b
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub(super) struct RawResponse {
    #[serde(rename = "type")]
    pub kind: RawResponseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operation: Option<String>,
    pub left_window: DurationSpec,
    pub right_window: DurationSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<DurationSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub(super) enum RawResponseKind {
    Metric,
    Trace,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub(super) struct RawTreatment {
    pub action: String,
    pub params: BTreeMap<String, Value>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub(super) struct RawSue {
    pub compose: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exclude: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub include: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub readiness_timeout: Option<DurationSpec>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub(super) struct RawLoadgen {
    pub run_time: DurationSpec,
    pub base_url: String,
    #[serde(default)]
    pub stages: Vec<RawStage>,
    pub tasks: Vec<RawTask>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub(super) struct RawStage {
    pub duration: DurationSpec,
    pub users: u32,
    pub spawn_rate: f64,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub(super) struct RawTask {
    pub endpoint: String,
    pub verb: RawVerb,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub(super) enum RawVerb {
    Get,
    Post,
    Put,
    Delete,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub(super) struct RawDetection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<u32>,
}
