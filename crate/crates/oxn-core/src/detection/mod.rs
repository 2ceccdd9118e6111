//! Fault detection over labeled frames.
//!
//! Decides, per response variable and fault, whether the fault shows up in
//! the telemetry. The detector interface admits arbitrary models; the
//! built-in detector is a baseline-fitted z-score threshold with a
//! k-consecutive firing rule. Scoring is label-blind: labels select the
//! baseline rows, nothing else.

mod threshold;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use threshold::ThresholdDetector;

use crate::config::DetectionConfig;
use crate::observation::{Frame, LabeledFrame, MetricRow, NO_TREATMENT};
use crate::treatments::TreatmentRecord;

/// Minimum pre-fault baseline rows the detector needs.
pub const MIN_BASELINE_ROWS: usize = 10;

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("insufficient baseline: {have} rows before the fault, need {need}")]
    InsufficientBaseline { have: usize, need: usize },
    #[error("detection over {0} frames is not supported here")]
    WrongKind(&'static str),
}

/// A fittable anomaly detector: fit on baseline rows, then flag rows.
pub trait Detector {
    fn fit(&mut self, baseline: &[f64]) -> Result<(), DetectionError>;
    fn score(&self, value: f64) -> bool;
}

/// Parameters the built-in detector actually used, kept for the report
/// and for re-marking flagged rows in plots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionParams {
    pub z: f64,
    pub k: usize,
    pub mu: f64,
    pub sigma: f64,
    pub baseline_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub response: String,
    pub treatment: String,
    pub detected: bool,
    /// First instant the k-consecutive rule fired, minus fault start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_latency_ms: Option<u64>,
    /// Fraction of flagged rows among the baseline rows.
    pub false_alarm_rate: f64,
    pub params: DetectionParams,
}

/// Run the built-in detector for one (metric frame, fault record) pair.
///
/// Baseline is the pre-fault NoTreatment rows; post-fault rows never train
/// the detector. Detected means at least `k` consecutive frame rows inside
/// the fault window all flag.
pub fn detect(
    frame: &LabeledFrame,
    record: &TreatmentRecord,
    config: &DetectionConfig,
) -> Result<DetectionResult, DetectionError> {
    let Frame::Metric(series) = &frame.frame else {
        return Err(DetectionError::WrongKind("trace"));
    };
    let labels: Vec<&str> = frame.labels().collect();
    detect_series(&series.rows, &labels, &series.response, record, config)
}

fn detect_series(
    rows: &[MetricRow],
    labels: &[&str],
    response: &str,
    record: &TreatmentRecord,
    config: &DetectionConfig,
) -> Result<DetectionResult, DetectionError> {
    let baseline: Vec<f64> = rows
        .iter()
        .zip(labels)
        .filter(|(row, label)| row.t_ms < record.start_ms && **label == NO_TREATMENT)
        .map(|(row, _)| row.value)
        .collect();
    if baseline.len() < MIN_BASELINE_ROWS {
        return Err(DetectionError::InsufficientBaseline {
            have: baseline.len(),
            need: MIN_BASELINE_ROWS,
        });
    }

    let mut detector = ThresholdDetector::new(config.z);
    detector.fit(&baseline)?;

    // flags are computed for every row, blind to labels
    let flags: Vec<bool> = rows.iter().map(|row| detector.score(row.value)).collect();

    let flagged_baseline = rows
        .iter()
        .zip(&flags)
        .filter(|(row, flag)| row.t_ms < record.start_ms && **flag)
        .count();
    let baseline_total = rows.iter().filter(|row| row.t_ms < record.start_ms).count();
    let false_alarm_rate = if baseline_total == 0 {
        0.0
    } else {
        flagged_baseline as f64 / baseline_total as f64
    };

    let in_window = |row: &MetricRow| row.t_ms >= record.start_ms && row.t_ms <= record.end_ms;
    let mut consecutive = 0usize;
    let mut fired_at: Option<u64> = None;
    for (row, flag) in rows.iter().zip(&flags) {
        if in_window(row) && *flag {
            consecutive += 1;
            if consecutive >= config.k {
                fired_at = Some(row.t_ms);
                break;
            }
        } else {
            consecutive = 0;
        }
    }

    Ok(DetectionResult {
        response: response.to_string(),
        treatment: record.treatment.clone(),
        detected: fired_at.is_some(),
        detection_latency_ms: fired_at.map(|t| t.saturating_sub(record.start_ms)),
        false_alarm_rate,
        params: DetectionParams {
            z: config.z,
            k: config.k,
            mu: detector.mu(),
            sigma: detector.sigma(),
            baseline_rows: baseline.len(),
        },
    })
}

/// Reduce a trace frame to per-step series (span count and p95 duration)
/// over the collection window, then run the same detector on both. The
/// duration series is in milliseconds; bucket rows anchor on bucket start.
pub fn detect_traces(
    frame: &LabeledFrame,
    record: &TreatmentRecord,
    config: &DetectionConfig,
    step_ms: u64,
    window: (u64, u64),
) -> Result<Vec<DetectionResult>, DetectionError> {
    let Frame::Trace(traces) = &frame.frame else {
        return Err(DetectionError::WrongKind("metric"));
    };
    let step_ms = step_ms.max(1);
    let buckets = window.1.saturating_sub(window.0) / step_ms;
    let mut counts = vec![0u64; buckets as usize];
    let mut durations: Vec<Vec<f64>> = vec![Vec::new(); buckets as usize];
    for row in &traces.rows {
        let t_ms = row.start_us / 1000;
        if t_ms < window.0 {
            continue;
        }
        let idx = (t_ms - window.0) / step_ms;
        if idx >= buckets {
            continue;
        }
        counts[idx as usize] += 1;
        durations[idx as usize].push(row.duration_us as f64 / 1000.0);
    }

    let to_rows = |values: Vec<f64>| -> Vec<MetricRow> {
        values
            .into_iter()
            .enumerate()
            .map(|(i, value)| MetricRow {
                t_ms: window.0 + i as u64 * step_ms,
                value,
            })
            .collect()
    };
    let count_rows = to_rows(counts.iter().map(|&c| c as f64).collect());
    let p95_rows = to_rows(
        durations
            .into_iter()
            .map(|mut bucket| {
                if bucket.is_empty() {
                    return 0.0;
                }
                bucket.sort_by(|a, b| a.partial_cmp(b).expect("durations are finite"));
                let rank = ((0.95 * bucket.len() as f64).ceil() as usize).max(1);
                bucket[rank - 1]
            })
            .collect(),
    );

    let label_of = |row: &MetricRow| -> &'static str {
        if record.labels_rows() && row.t_ms >= record.start_ms && row.t_ms <= record.end_ms {
            // only this record's window matters for the derived series
            "fault"
        } else {
            NO_TREATMENT
        }
    };

    let mut results = Vec::with_capacity(2);
    for (suffix, rows) in [("span_count", count_rows), ("p95_duration_ms", p95_rows)] {
        let labels: Vec<&str> = rows.iter().map(&label_of).collect();
        let name = format!("{}.{suffix}", traces.response);
        results.push(detect_series(&rows, &labels, &name, record, config)?);
    }
    Ok(results)
}

/// Per-treatment observability summary across responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentSummary {
    pub treatment: String,
    /// The top-line verdict: detected by any observed response.
    pub detected: bool,
    /// Detecting responses, sorted by name (stable under latency ties).
    pub detected_by: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_detection_latency_ms: Option<u64>,
    pub mean_false_alarm_rate: f64,
}

/// Aggregate detection results per treatment, keeping first-appearance
/// treatment order.
pub fn summarize(results: &[DetectionResult]) -> Vec<TreatmentSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in results {
        if !order.contains(&r.treatment.as_str()) {
            order.push(&r.treatment);
        }
    }
    order
        .into_iter()
        .map(|treatment| {
            let group: Vec<&DetectionResult> = results
                .iter()
                .filter(|r| r.treatment == treatment)
                .collect();
            let mut detected_by: Vec<String> = group
                .iter()
                .filter(|r| r.detected)
                .map(|r| r.response.clone())
                .collect();
            detected_by.sort();
            let min_detection_latency_ms =
                group.iter().filter_map(|r| r.detection_latency_ms).min();
            let mean_false_alarm_rate = if group.is_empty() {
                0.0
            } else {
                group.iter().map(|r| r.false_alarm_rate).sum::<f64>() / group.len() as f64
            };
            TreatmentSummary {
                treatment: treatment.to_string(),
                detected: !detected_by.is_empty(),
                detected_by,
                min_detection_latency_ms,
                mean_false_alarm_rate,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Phase;
    use crate::observation::{label_frame, TimeSeriesFrame};
    use crate::treatments::TreatmentStatus;

    fn record(start_ms: u64, end_ms: u64) -> TreatmentRecord {
        TreatmentRecord {
            treatment: "fault".into(),
            action: "loss".into(),
            phase: Phase::Fault,
            service: "svc".into(),
            params: Default::default(),
            start_ms,
            end_ms,
            status: TreatmentStatus::Reverted,
            error: None,
        }
    }

    fn series_frame(values: &[f64], step_ms: u64) -> LabeledFrame {
        let frame = Frame::Metric(TimeSeriesFrame {
            response: "r".into(),
            query: "q".into(),
            step_ms,
            rows: values
                .iter()
                .enumerate()
                .map(|(i, &value)| MetricRow {
                    t_ms: i as u64 * step_ms,
                    value,
                })
                .collect(),
        });
        label_frame("r", frame, &[]).unwrap()
    }

    /// Brute-force reference: apply the mu/sigma/z/k definitions directly.
    fn brute_force(
        rows: &[(u64, f64)],
        start_ms: u64,
        end_ms: u64,
        z: f64,
        k: usize,
    ) -> (bool, Option<u64>, f64) {
        let baseline: Vec<f64> = rows
            .iter()
            .filter(|(t, _)| *t < start_ms)
            .map(|(_, v)| *v)
            .collect();
        let n = baseline.len() as f64;
        let mu = baseline.iter().sum::<f64>() / n;
        let sigma = (baseline.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n)
            .sqrt()
            .max(1e-9);
        let flag = |v: f64| (v - mu).abs() > z * sigma;
        let false_alarms = baseline.iter().filter(|v| flag(**v)).count() as f64 / n;
        let mut run = 0;
        for (t, v) in rows {
            if *t >= start_ms && *t <= end_ms && flag(*v) {
                run += 1;
                if run >= k {
                    return (true, Some(t - start_ms), false_alarms);
                }
            } else {
                run = 0;
            }
        }
        (false, None, false_alarms)
    }

    #[test]
    fn obvious_shift_fires_on_the_third_consecutive_row() {
        // 60 baseline rows around 10, then constant 50 inside the window
        let mut values: Vec<f64> = (0..60)
            .map(|i| 10.0 + ((i % 7) as f64 - 3.0) * 0.3)
            .collect();
        values.extend(std::iter::repeat_n(50.0, 30));
        values.extend((0..30).map(|i| 10.0 + ((i % 5) as f64 - 2.0) * 0.3));
        let frame = series_frame(&values, 1000);
        let fault = record(60_000, 89_000);
        let config = DetectionConfig { z: 3.0, k: 3 };
        let result = detect(&frame, &fault, &config).unwrap();
        assert!(result.detected);
        // third consecutive flagged row: 2 steps after fault start
        assert_eq!(result.detection_latency_ms, Some(2_000));
        assert_eq!(result.false_alarm_rate, 0.0);

        let rows: Vec<(u64, f64)> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| (i as u64 * 1000, v))
            .collect();
        let (bf_detected, bf_latency, bf_far) = brute_force(&rows, 60_000, 89_000, 3.0, 3);
        assert_eq!(
            (
                result.detected,
                result.detection_latency_ms,
                result.false_alarm_rate
            ),
            (bf_detected, bf_latency, bf_far)
        );
    }

    #[test]
    fn zero_variance_baseline_guard() {
        let mut values = vec![5.0; 60];
        values.extend(std::iter::repeat_n(5.0, 30));
        let frame = series_frame(&values, 1000);
        let fault = record(60_000, 89_000);
        let result = detect(&frame, &fault, &DetectionConfig::default()).unwrap();
        assert!(!result.detected);
        assert_eq!(result.false_alarm_rate, 0.0);

        // but any deviation from a constant baseline flags
        let mut shifted = vec![5.0; 60];
        shifted.extend(std::iter::repeat_n(5.001, 30));
        let frame = series_frame(&shifted, 1000);
        let result = detect(&frame, &fault, &DetectionConfig::default()).unwrap();
        assert!(result.detected);
    }

    #[test]
    fn insufficient_baseline_is_an_error() {
        let values = vec![1.0; 12];
        let frame = series_frame(&values, 1000);
        let fault = record(5_000, 11_000);
        assert!(matches!(
            detect(&frame, &fault, &DetectionConfig::default()),
            Err(DetectionError::InsufficientBaseline { have: 5, need: 10 })
        ));
    }

    #[test]
    fn raising_z_never_creates_detections() {
        let mut values: Vec<f64> = (0..60)
            .map(|i| 10.0 + ((i * 13 % 11) as f64 - 5.0) * 0.5)
            .collect();
        values.extend((0..30).map(|i| 14.0 + (i % 3) as f64));
        let frame = series_frame(&values, 1000);
        let fault = record(60_000, 89_000);
        let mut previous_detected = true;
        for z in [1.0, 2.0, 3.0, 5.0, 10.0, 100.0] {
            let result = detect(&frame, &fault, &DetectionConfig { z, k: 3 }).unwrap();
            assert!(
                previous_detected || !result.detected,
                "z={z} turned detected back on"
            );
            previous_detected = result.detected;
        }
    }

    #[test]
    fn scoring_is_label_blind() {
        let mut values: Vec<f64> = (0..60)
            .map(|i| 10.0 + ((i % 7) as f64 - 3.0) * 0.3)
            .collect();
        values.extend(std::iter::repeat_n(50.0, 30));
        let rows: Vec<MetricRow> = values
            .iter()
            .enumerate()
            .map(|(i, &value)| MetricRow {
                t_ms: i as u64 * 1000,
                value,
            })
            .collect();
        let fault = record(60_000, 89_000);
        let config = DetectionConfig::default();

        // same rows, two different labelings right of the baseline
        let frame_a = label_frame(
            "a",
            Frame::Metric(TimeSeriesFrame {
                response: "r".into(),
                query: "q".into(),
                step_ms: 1000,
                rows: rows.clone(),
            }),
            std::slice::from_ref(&fault),
        )
        .unwrap();
        let frame_b = series_frame(&values, 1000); // everything NoTreatment
        let a = detect(&frame_a, &fault, &config).unwrap();
        let b = detect(&frame_b, &fault, &config).unwrap();
        assert_eq!(a.detected, b.detected);
        assert_eq!(a.detection_latency_ms, b.detection_latency_ms);
    }

    #[test]
    fn trace_reduction_detects_span_count_collapse() {
        use crate::observation::{TraceFrame, TraceRow};
        // steady 20 spans/s, then none inside the fault window
        let mut rows = Vec::new();
        for s in 0..120u64 {
            let in_fault = (60..90).contains(&s);
            if in_fault {
                continue;
            }
            for r in 0..20u64 {
                rows.push(TraceRow {
                    trace_id: format!("{s}-{r}"),
                    span_id: "s".into(),
                    service: "gateway".into(),
                    operation: "GET /".into(),
                    start_us: (s * 1000 + r * 50) * 1000,
                    duration_us: 100_000,
                    status: "ok".into(),
                });
            }
        }
        let frame = label_frame(
            "t",
            Frame::Trace(TraceFrame {
                response: "t".into(),
                selector: "gateway".into(),
                rows,
            }),
            &[],
        )
        .unwrap();
        let fault = record(60_000, 89_000);
        let results = detect_traces(
            &frame,
            &fault,
            &DetectionConfig::default(),
            1000,
            (0, 120_000),
        )
        .unwrap();
        assert_eq!(results.len(), 2);
        let count = results
            .iter()
            .find(|r| r.response.ends_with("span_count"))
            .unwrap();
        assert!(count.detected);
    }

    #[test]
    fn summaries_aggregate_and_tie_break_by_name() {
        let base = DetectionParams {
            z: 3.0,
            k: 3,
            mu: 0.0,
            sigma: 1.0,
            baseline_rows: 60,
        };
        let results = vec![
            DetectionResult {
                response: "b_response".into(),
                treatment: "fault".into(),
                detected: true,
                detection_latency_ms: Some(2000),
                false_alarm_rate: 0.01,
                params: base,
            },
            DetectionResult {
                response: "a_response".into(),
                treatment: "fault".into(),
                detected: true,
                detection_latency_ms: Some(2000),
                false_alarm_rate: 0.03,
                params: base,
            },
            DetectionResult {
                response: "c_response".into(),
                treatment: "quiet".into(),
                detected: false,
                detection_latency_ms: None,
                false_alarm_rate: 0.0,
                params: base,
            },
        ];
        let summaries = summarize(&results);
        assert_eq!(summaries.len(), 2);
        assert!(summaries[0].detected);
        assert_eq!(summaries[0].detected_by, vec!["a_response", "b_response"]);
        assert_eq!(summaries[0].min_detection_latency_ms, Some(2000));
        assert!((summaries[0].mean_false_alarm_rate - 0.02).abs() < 1e-12);
        assert!(!summaries[1].detected);
        assert!(summaries[1].detected_by.is_empty());
    }
}
