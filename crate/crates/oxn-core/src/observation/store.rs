//! Frame persistence: one CSV per labeled frame plus a JSON manifest with
//! row counts, time ranges and content hashes. Writes are atomic
//! (temp file + rename) and byte-deterministic for the same inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::treatments::TreatmentRecord;

use super::{Frame, LabeledFrame, MetricRow, TimeSeriesFrame, TraceFrame, TraceRow};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("bad frame file {path}: {message}")]
    BadFrame { path: PathBuf, message: String },
    #[error("manifest missing or invalid: {0}")]
    BadManifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |e| StoreError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameManifestEntry {
    pub name: String,
    pub kind: String,
    /// Path relative to the run directory.
    pub path: String,
    pub rows: usize,
    pub columns: Vec<String>,
    /// Anchor range of the rows, epoch ms; absent for empty frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_range_ms: Option<(u64, u64)>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub run_id: String,
    pub experiment_sha256: String,
    pub engine_version: String,
    pub frames: Vec<FrameManifestEntry>,
    pub treatment_records: Vec<TreatmentRecord>,
}

const METRIC_COLUMNS: [&str; 3] = ["timestamp", "value", "label"];
const TRACE_COLUMNS: [&str; 8] = [
    "trace_id",
    "span_id",
    "service",
    "operation",
    "start_us",
    "duration_us",
    "status",
    "label",
];

/// Epoch-ms timestamp as decimal seconds with millisecond precision.
fn format_ts(t_ms: u64) -> String {
    format!("{}.{:03}", t_ms / 1000, t_ms % 1000)
}

fn parse_ts(s: &str) -> Option<u64> {
    let v: f64 = s.parse().ok()?;
    Some((v * 1000.0).round() as u64)
}

/// Floats at 17 significant digits: parses back to the identical bits.
fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn frame_csv(frame: &LabeledFrame) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    match &frame.frame {
        Frame::Metric(f) => {
            writer.write_record(METRIC_COLUMNS).expect("header");
            for (i, row) in f.rows.iter().enumerate() {
                writer
                    .write_record([
                        format_ts(row.t_ms),
                        format_value(row.value),
                        frame.label_of(i).to_string(),
                    ])
                    .expect("row");
            }
        }
        Frame::Trace(f) => {
            writer.write_record(TRACE_COLUMNS).expect("header");
            for (i, row) in f.rows.iter().enumerate() {
                writer
                    .write_record([
                        row.trace_id.as_str(),
                        row.span_id.as_str(),
                        row.service.as_str(),
                        row.operation.as_str(),
                        &row.start_us.to_string(),
                        &row.duration_us.to_string(),
                        row.status.as_str(),
                        frame.label_of(i),
                    ])
                    .expect("row");
            }
        }
    }
    String::from_utf8(writer.into_inner().expect("csv buffer")).expect("csv is utf-8")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

/// Write all frames under `<run_dir>/frames/` and the manifest at
/// `<run_dir>/manifest.json`. Frames are written in name order so repeated
/// calls with the same inputs produce byte-identical files.
pub fn write_store(
    frames: &[LabeledFrame],
    records: &[TreatmentRecord],
    run_id: &str,
    experiment_sha256: &str,
    run_dir: &Path,
) -> Result<StoreManifest, StoreError> {
    let frames_dir = run_dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;

    let mut ordered: Vec<&LabeledFrame> = frames.iter().collect();
    ordered.sort_by(|a, b| a.name.cmp(&b.name));

    let mut entries = Vec::with_capacity(ordered.len());
    for frame in ordered {
        let csv_text = frame_csv(frame);
        let rel_path = format!("frames/{}.csv", frame.name);
        let path = run_dir.join(&rel_path);
        write_atomic(&path, csv_text.as_bytes())?;
        let time_range_ms = if frame.frame.is_empty() {
            None
        } else {
            Some((
                frame.frame.anchor_ms(0),
                frame.frame.anchor_ms(frame.frame.len() - 1),
            ))
        };
        entries.push(FrameManifestEntry {
            name: frame.name.clone(),
            kind: frame.frame.kind_str().to_string(),
            path: rel_path,
            rows: frame.len(),
            columns: match frame.frame {
                Frame::Metric(_) => METRIC_COLUMNS.iter().map(|s| s.to_string()).collect(),
                Frame::Trace(_) => TRACE_COLUMNS.iter().map(|s| s.to_string()).collect(),
            },
            time_range_ms,
            sha256: sha256_hex(csv_text.as_bytes()),
        });
    }

    let manifest = StoreManifest {
        run_id: run_id.to_string(),
        experiment_sha256: experiment_sha256.to_string(),
        engine_version: crate::ENGINE_VERSION.to_string(),
        frames: entries,
        treatment_records: records.to_vec(),
    };
    let manifest_path = run_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&manifest_path, json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(run_dir: &Path) -> Result<StoreManifest, StoreError> {
    let path = run_dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| StoreError::BadManifest(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| StoreError::BadManifest(e.to_string()))
}

/// Read one frame CSV back into a labeled frame. The kind is inferred from
/// the header row.
pub fn read_frame(path: &Path, name: &str) -> Result<LabeledFrame, StoreError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| StoreError::BadFrame {
            path: path.into(),
            message: e.to_string(),
        })?
        .iter()
        .map(String::from)
        .collect();
    let bad = |message: String| StoreError::BadFrame {
        path: path.to_path_buf(),
        message,
    };

    if headers == METRIC_COLUMNS {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            let t_ms = parse_ts(&record[0])
                .ok_or_else(|| bad(format!("bad timestamp {:?}", &record[0])))?;
            let value: f64 = record[1]
                .parse()
                .map_err(|_| bad(format!("bad value {:?}", &record[1])))?;
            rows.push(MetricRow { t_ms, value });
            labels.push(record[2].to_string());
        }
        let frame = Frame::Metric(TimeSeriesFrame {
            response: name.to_string(),
            query: String::new(),
            step_ms: 0,
            rows,
        });
        Ok(LabeledFrame::from_parts(name.to_string(), frame, labels))
    } else if headers == TRACE_COLUMNS {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            rows.push(TraceRow {
                trace_id: record[0].to_string(),
                span_id: record[1].to_string(),
                service: record[2].to_string(),
                operation: record[3].to_string(),
                start_us: record[4].parse().map_err(|_| bad("bad start_us".into()))?,
                duration_us: record[5]
                    .parse()
                    .map_err(|_| bad("bad duration_us".into()))?,
                status: record[6].to_string(),
            });
            labels.push(record[7].to_string());
        }
        let frame = Frame::Trace(TraceFrame {
            response: name.to_string(),
            selector: String::new(),
            rows,
        });
        Ok(LabeledFrame::from_parts(name.to_string(), frame, labels))
    } else {
        Err(bad(format!("unrecognized columns {headers:?}")))
    }
}

/// Re-hash every frame listed in the manifest. Returns the names of frames
/// whose contents no longer match.
pub fn verify_store(run_dir: &Path) -> Result<Vec<String>, StoreError> {
    let manifest = read_manifest(run_dir)?;
    let mut corrupt = Vec::new();
    for entry in &manifest.frames {
        let path = run_dir.join(&entry.path);
        match std::fs::read(&path) {
            Err(_) => corrupt.push(entry.name.clone()),
            Ok(bytes) => {
                if sha256_hex(&bytes) != entry.sha256 {
                    corrupt.push(entry.name.clone());
                }
            }
        }
    }
    Ok(corrupt)
}
