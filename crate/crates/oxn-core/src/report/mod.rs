//! The machine-readable experiment report: one JSON document that embeds
//! the experiment file, the treatment records, the frame manifest, the
//! detection outcome and the run's timings. Everything a run produced is
//! reachable from here via paths relative to the run directory.

pub mod plots;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{DetectionResult, TreatmentSummary};
use crate::observation::StoreManifest;
use crate::treatments::TreatmentRecord;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot read report: {0}")]
    Read(String),
    #[error("cannot write report: {0}")]
    Write(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Failed,
}

/// Which pipeline stage failed and why; present on partial reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentFileInfo {
    pub path: String,
    pub sha256: String,
    /// Embedded verbatim so the report is self-contained.
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntryInfo {
    pub treatment: String,
    pub offset_ms: u64,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInfo {
    pub warmup_ms: u64,
    pub gap_ms: u64,
    pub tail_ms: u64,
    pub entries: Vec<ScheduleEntryInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSummary {
    pub total_sent: u64,
    pub total_successes: u64,
    pub total_failures: u64,
    /// Relative path of the per-second stats stream.
    pub stats_csv: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSection {
    pub results: Vec<DetectionResult>,
    pub summaries: Vec<TreatmentSummary>,
    /// Non-fatal per-pair detection failures (e.g. insufficient baseline).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub run_id: String,
    pub engine_version: String,
    pub backend: String,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<RunFailure>,
    pub experiment: ExperimentFileInfo,
    /// Wall-clock milliseconds per pipeline step.
    pub timings_ms: BTreeMap<String, u64>,
    pub treatments: Vec<TreatmentRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load: Option<LoadSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<StoreManifest>,
    /// Responses whose collection produced zero rows.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub empty_frames: Vec<String>,
    pub detection: DetectionSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub taints: Vec<String>,
    /// Relative paths of run artifacts (journal, effective compose, ...).
    pub artifacts: BTreeMap<String, String>,
}

pub const REPORT_FILE: &str = "report.json";

impl ExperimentReport {
    pub fn write(&self, run_dir: &Path) -> Result<(), ReportError> {
        let path = run_dir.join(REPORT_FILE);
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, json.as_bytes()).map_err(|e| ReportError::Write(e.to_string()))?;
        std::fs::rename(&tmp, &path).map_err(|e| ReportError::Write(e.to_string()))?;
        Ok(())
    }

    pub fn read(run_dir: &Path) -> Result<ExperimentReport, ReportError> {
        let path = run_dir.join(REPORT_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| ReportError::Read(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ReportError::Read(e.to_string()))
    }

    /// The report as JSON with the run-specific fields (run id, wall-clock
    /// timings) removed: two runs of the same experiment and seed on the
    /// simulated backend must agree on this value.
    pub fn reproducibility_view(&self) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("report serializes");
        let obj = value.as_object_mut().expect("report is an object");
        obj.remove("run_id");
        obj.remove("timings_ms");
        if let Some(frames) = obj.get_mut("frames").and_then(|f| f.as_object_mut()) {
            frames.remove("run_id");
        }
        value
    }

    /// Short human-readable summary for the CLI.
    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "run {} [{}] status={:?} seed={}\n",
            self.run_id, self.backend, self.status, self.seed
        ));
        if let Some(failure) = &self.failure {
            out.push_str(&format!(
                "failed at {}: {}\n",
                failure.stage, failure.message
            ));
        }
        for taint in &self.taints {
            out.push_str(&format!("tainted: {taint}\n"));
        }
        out.push_str(&format!("treatments ({}):\n", self.treatments.len()));
        for record in &self.treatments {
            out.push_str(&format!(
                "  {} [{}] {} on {} window=[{}ms, {}ms] {:?}\n",
                record.treatment,
                match record.phase {
                    crate::config::Phase::Instrumentation => "instrumentation",
                    crate::config::Phase::Fault => "fault",
                },
                record.action,
                record.service,
                record.start_ms,
                record.end_ms,
                record.status
            ));
        }
        if let Some(load) = &self.load {
            out.push_str(&format!(
                "load: {} requests, {} ok, {} failed ({})\n",
                load.total_sent, load.total_successes, load.total_failures, load.stats_csv
            ));
        }
        if let Some(frames) = &self.frames {
            out.push_str(&format!("frames ({}):\n", frames.frames.len()));
            for frame in &frames.frames {
                out.push_str(&format!(
                    "  {} [{}] {} rows -> {}\n",
                    frame.name, frame.kind, frame.rows, frame.path
                ));
            }
        }
        if self.detection.summaries.is_empty() {
            out.push_str("detection: no fault records (baseline run)\n");
        } else {
            out.push_str("detection:\n");
            for summary in &self.detection.summaries {
                let latency = summary
                    .min_detection_latency_ms
                    .map(|l| format!("{l}ms"))
                    .unwrap_or_else(|| "-".into());
                out.push_str(&format!(
                    "  {}: detected={} by={:?} min_latency={} mean_far={:.4}\n",
                    summary.treatment,
                    summary.detected,
                    summary.detected_by,
                    latency,
                    summary.mean_false_alarm_rate
                ));
            }
        }
        out
    }
}
