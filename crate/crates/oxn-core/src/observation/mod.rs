//! Response variable collection, labeling and persistence.
//!
//! Frames are collected from metric and trace backends over windows
//! anchored to treatment records, then every row is labeled with the
//! treatment whose journaled window contains its time anchor. Metric rows
//! anchor on their sample timestamp, trace rows on the span start.

pub mod collect;
pub mod store;

use thiserror::Error;

pub use collect::{
    collect_metric, collect_traces, CollectError, HttpMetricBackend, HttpTraceBackend,
    MetricBackend, TraceBackend,
};
pub use store::{
    read_frame, verify_store, write_store, FrameManifestEntry, StoreError, StoreManifest,
};

use crate::treatments::TreatmentRecord;

/// Label given to rows outside every fault window.
pub const NO_TREATMENT: &str = "NoTreatment";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    /// Epoch milliseconds.
    pub t_ms: u64,
    pub value: f64,
}

/// A collected metric time series.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    pub response: String,
    pub query: String,
    pub step_ms: u64,
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub trace_id: String,
    pub span_id: String,
    pub service: String,
    pub operation: String,
    /// Epoch microseconds.
    pub start_us: u64,
    pub duration_us: u64,
    pub status: String,
}

/// A collected span table.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFrame {
    pub response: String,
    pub selector: String,
    pub rows: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Metric(TimeSeriesFrame),
    Trace(TraceFrame),
}

impl Frame {
    pub fn response(&self) -> &str {
        match self {
            Frame::Metric(f) => &f.response,
            Frame::Trace(f) => &f.response,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Frame::Metric(f) => f.rows.len(),
            Frame::Trace(f) => f.rows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row time anchor in epoch milliseconds: sample timestamp for metric
    /// rows, span start for trace rows.
    pub fn anchor_ms(&self, row: usize) -> u64 {
        match self {
            Frame::Metric(f) => f.rows[row].t_ms,
            Frame::Trace(f) => f.rows[row].start_us / 1000,
        }
    }

    pub fn kind_str(&self) -> &'static str {
        match self {
            Frame::Metric(_) => "metric",
            Frame::Trace(_) => "trace",
        }
    }
}

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("treatment windows overlap: {first:?} [{first_window:?}] and {second:?} [{second_window:?}]")]
    Overlap {
        first: String,
        first_window: (u64, u64),
        second: String,
        second_window: (u64, u64),
    },
}

/// A frame plus one label per row. Labels are interned; index 0 is
/// [`NO_TREATMENT`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    /// Unique artifact name, used as the CSV file stem.
    pub name: String,
    pub frame: Frame,
    labels: Vec<u16>,
    label_names: Vec<String>,
}

impl LabeledFrame {
    pub fn label_of(&self, row: usize) -> &str {
        &self.label_names[self.labels[row] as usize]
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.labels
            .iter()
            .map(|&i| self.label_names[i as usize].as_str())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub(crate) fn from_parts(name: String, frame: Frame, labels: Vec<String>) -> LabeledFrame {
        let mut label_names: Vec<String> = vec![NO_TREATMENT.to_string()];
        let mut indices = Vec::with_capacity(labels.len());
        for label in labels {
            let idx = match label_names.iter().position(|l| *l == label) {
                Some(i) => i,
                None => {
                    label_names.push(label);
                    label_names.len() - 1
                }
            };
            indices.push(idx as u16);
        }
        LabeledFrame {
            name,
            frame,
            labels: indices,
            label_names,
        }
    }
}

/// Label every row of a frame by the fault record whose `[start, end]`
/// window (journal timestamps, milliseconds) contains the row's anchor.
/// Pure in (frame, records); record order does not matter. Fails if any
/// two labeling windows intersect.
pub fn label_frame(
    name: &str,
    frame: Frame,
    records: &[TreatmentRecord],
) -> Result<LabeledFrame, LabelError> {
    let mut windows: Vec<&TreatmentRecord> = records.iter().filter(|r| r.labels_rows()).collect();
    windows.sort_by_key(|r| (r.start_ms, r.end_ms, r.treatment.clone()));
    for pair in windows.windows(2) {
        // closed intervals: sharing even a single instant is an overlap
        if pair[0].end_ms >= pair[1].start_ms {
            return Err(LabelError::Overlap {
                first: pair[0].treatment.clone(),
                first_window: pair[0].window(),
                second: pair[1].treatment.clone(),
                second_window: pair[1].window(),
            });
        }
    }

    let mut label_names: Vec<String> = vec![NO_TREATMENT.to_string()];
    label_names.extend(windows.iter().map(|r| r.treatment.clone()));

    let labels: Vec<u16> = (0..frame.len())
        .map(|row| {
            let anchor = frame.anchor_ms(row);
            match windows
                .iter()
                .position(|r| anchor >= r.start_ms && anchor <= r.end_ms)
            {
                Some(i) => (i + 1) as u16,
                None => 0,
            }
        })
        .collect();

    Ok(LabeledFrame {
        name: name.to_string(),
        frame,
        labels,
        label_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Phase;
    use crate::treatments::TreatmentStatus;

    fn record(name: &str, start_ms: u64, end_ms: u64) -> TreatmentRecord {
        TreatmentRecord {
            treatment: name.into(),
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

    fn metric_frame(times_ms: &[u64]) -> Frame {
        Frame::Metric(TimeSeriesFrame {
            response: "r".into(),
            query: "q".into(),
            step_ms: 1000,
            rows: times_ms
                .iter()
                .map(|&t_ms| MetricRow { t_ms, value: 1.0 })
                .collect(),
        })
    }

    #[test]
    fn rows_inside_the_window_get_the_fault_name() {
        let frame = metric_frame(&[50_000, 150_000, 250_000]);
        let labeled = label_frame("f", frame, &[record("fault", 100_000, 220_000)]).unwrap();
        assert_eq!(labeled.label_of(0), NO_TREATMENT);
        assert_eq!(labeled.label_of(1), "fault");
        assert_eq!(labeled.label_of(2), NO_TREATMENT);
    }

    #[test]
    fn window_bounds_are_inclusive() {
        let frame = metric_frame(&[99_999, 100_000, 220_000, 220_001]);
        let labeled = label_frame("f", frame, &[record("fault", 100_000, 220_000)]).unwrap();
        assert_eq!(labeled.label_of(0), NO_TREATMENT);
        assert_eq!(labeled.label_of(1), "fault");
        assert_eq!(labeled.label_of(2), "fault");
        assert_eq!(labeled.label_of(3), NO_TREATMENT);
    }

    #[test]
    fn span_anchors_on_start_time() {
        // span starts 1ms before the window but lasts into it
        let frame = Frame::Trace(TraceFrame {
            response: "t".into(),
            selector: "gateway".into(),
            rows: vec![TraceRow {
                trace_id: "a".into(),
                span_id: "b".into(),
                service: "gateway".into(),
                operation: "GET /".into(),
                start_us: 99_999_000,
                duration_us: 5_000_000,
                status: "ok".into(),
            }],
        });
        let labeled = label_frame("f", frame, &[record("fault", 100_000, 220_000)]).unwrap();
        assert_eq!(labeled.label_of(0), NO_TREATMENT);
    }

    #[test]
    fn permuting_records_does_not_change_labels() {
        let frame = metric_frame(&(0..400).map(|i| i * 1000).collect::<Vec<_>>());
        let a = record("first", 50_000, 100_000);
        let b = record("second", 200_000, 260_000);
        let fwd = label_frame("f", frame.clone(), &[a.clone(), b.clone()]).unwrap();
        let rev = label_frame("f", frame, &[b, a]).unwrap();
        let fwd_labels: Vec<&str> = fwd.labels().collect();
        let rev_labels: Vec<&str> = rev.labels().collect();
        assert_eq!(fwd_labels, rev_labels);
    }

    #[test]
    fn overlapping_windows_are_rejected() {
        let frame = metric_frame(&[0]);
        let err =
            label_frame("f", frame, &[record("a", 100, 200), record("b", 200, 300)]).unwrap_err();
        assert!(matches!(err, LabelError::Overlap { .. }));
    }

    #[test]
    fn non_labeling_records_are_ignored() {
        let mut skipped = record("skipped", 100, 200);
        skipped.status = TreatmentStatus::Skipped;
        let mut instrumentation = record("instr", 0, 0);
        instrumentation.phase = Phase::Instrumentation;
        let frame = metric_frame(&[150]);
        let labeled = label_frame("f", frame, &[skipped, instrumentation]).unwrap();
        assert_eq!(labeled.label_of(0), NO_TREATMENT);
    }
}
