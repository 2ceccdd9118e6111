//! Static SVG plots of labeled frames: value against time, fault windows
//! shaded, detector-flagged rows marked. One SVG per frame, written under
//! `<run-dir>/plots/`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::detection::DetectionResult;
use crate::observation::{read_frame, Frame, LabeledFrame};
use crate::treatments::TreatmentRecord;

use super::ExperimentReport;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("cannot render plots: {0}")]
    BadRun(String),
    #[error("plot i/o error: {0}")]
    Io(#[from] std::io::Error),
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 320.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 16.0;
const MARGIN_TOP: f64 = 18.0;
const MARGIN_BOTTOM: f64 = 42.0;

/// Render one SVG per frame listed in the run's manifest. Unreadable
/// frames are skipped with a warning entry in the returned list.
pub fn render_run_plots(run_dir: &Path) -> Result<Vec<PathBuf>, PlotError> {
    let report = ExperimentReport::read(run_dir).map_err(|e| PlotError::BadRun(e.to_string()))?;
    let manifest = report.frames.as_ref().ok_or_else(|| {
        PlotError::BadRun("run has no frame manifest (did the run finish collecting?)".into())
    })?;
    let plots_dir = run_dir.join("plots");
    std::fs::create_dir_all(&plots_dir)?;

    let mut written = Vec::new();
    for entry in &manifest.frames {
        let frame_path = run_dir.join(&entry.path);
        let frame = match read_frame(&frame_path, &entry.name) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("skipping unreadable frame {}: {e}", entry.name);
                continue;
            }
        };
        // the detection result for this frame, if any, re-marks flags
        let detection = report
            .detection
            .results
            .iter()
            .find(|r| entry.name == format!("{}__{}", r.response, r.treatment));
        let svg = frame_svg(&frame, &report.treatments, detection);
        let out = plots_dir.join(format!("{}.svg", entry.name));
        std::fs::write(&out, svg)?;
        written.push(out);
    }
    Ok(written)
}

/// Render a single frame.
pub fn frame_svg(
    frame: &LabeledFrame,
    records: &[TreatmentRecord],
    detection: Option<&DetectionResult>,
) -> String {
    let points: Vec<(u64, f64)> = match &frame.frame {
        Frame::Metric(f) => f.rows.iter().map(|r| (r.t_ms, r.value)).collect(),
        Frame::Trace(f) => f
            .rows
            .iter()
            .map(|r| (r.start_us / 1000, r.duration_us as f64 / 1000.0))
            .collect(),
    };
    let y_label = match &frame.frame {
        Frame::Metric(_) => "value",
        Frame::Trace(_) => "span duration (ms)",
    };

    let mut svg = String::new();
    let _ = write!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"##
    );
    let _ = write!(
        svg,
        r##"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"##
    );
    let _ = write!(
        svg,
        r##"<text x="{}" y="13" font-family="monospace" font-size="12">{}</text>"##,
        MARGIN_LEFT,
        xml_escape(&frame.name)
    );

    if points.is_empty() {
        let _ = write!(
            svg,
            r##"<text x="{}" y="{}" font-family="monospace" font-size="16" fill="#888">no data</text>"##,
            WIDTH / 2.0 - 30.0,
            HEIGHT / 2.0
        );
        svg.push_str("</svg>");
        return svg;
    }

    let t0 = points.first().map(|p| p.0).unwrap_or(0);
    let t1 = points.last().map(|p| p.0).unwrap_or(t0 + 1).max(t0 + 1);
    let (mut y_min, mut y_max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        });
    if (y_max - y_min).abs() < 1e-12 {
        y_min -= 1.0;
        y_max += 1.0;
    }
    let pad = (y_max - y_min) * 0.05;
    y_min -= pad;
    y_max += pad;

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |t: u64| MARGIN_LEFT + (t - t0) as f64 / (t1 - t0) as f64 * plot_w;
    let sy = |v: f64| MARGIN_TOP + (1.0 - (v - y_min) / (y_max - y_min)) * plot_h;

    // shaded fault windows clipped to the frame range
    for record in records.iter().filter(|r| r.labels_rows()) {
        let (start, end) = record.window();
        if end < t0 || start > t1 {
            continue;
        }
        let x0 = sx(start.max(t0));
        let x1 = sx(end.min(t1));
        let _ = write!(
            svg,
            r##"<rect x="{x0:.1}" y="{MARGIN_TOP}" width="{:.1}" height="{plot_h:.1}" fill="#d33" opacity="0.12"/>"##,
            (x1 - x0).max(1.0)
        );
        let _ = write!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" font-family="monospace" font-size="10" fill="#a22">{}</text>"##,
            x0 + 2.0,
            MARGIN_TOP + 11.0,
            xml_escape(&record.treatment)
        );
    }

    match &frame.frame {
        Frame::Metric(_) => {
            let mut path = String::from("M");
            for (i, (t, v)) in points.iter().enumerate() {
                if i > 0 {
                    path.push('L');
                }
                let _ = write!(path, "{:.1} {:.1}", sx(*t), sy(*v));
            }
            let _ = write!(
                svg,
                r##"<path d="{path}" fill="none" stroke="#246" stroke-width="1.2"/>"##
            );
        }
        Frame::Trace(_) => {
            for (t, v) in &points {
                let _ = write!(
                    svg,
                    r##"<circle cx="{:.1}" cy="{:.1}" r="1.4" fill="#246" opacity="0.6"/>"##,
                    sx(*t),
                    sy(*v)
                );
            }
        }
    }

    // rows the detector flagged, re-derived from the recorded mu/sigma/z
    if let Some(result) = detection {
        let threshold = result.params.z * result.params.sigma;
        for (t, v) in &points {
            if (v - result.params.mu).abs() > threshold {
                let _ = write!(
                    svg,
                    r##"<circle cx="{:.1}" cy="{:.1}" r="2.6" fill="none" stroke="#d60" stroke-width="1.2"/>"##,
                    sx(*t),
                    sy(*v)
                );
            }
        }
    }

    // axes and labels
    let axis_y = MARGIN_TOP + plot_h;
    let _ = write!(
        svg,
        r##"<line x1="{MARGIN_LEFT}" y1="{axis_y:.1}" x2="{:.1}" y2="{axis_y:.1}" stroke="#333"/>"##,
        MARGIN_LEFT + plot_w
    );
    let _ = write!(
        svg,
        r##"<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{axis_y:.1}" stroke="#333"/>"##
    );
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let t = t0 + ((t1 - t0) as f64 * frac) as u64;
        let x = sx(t);
        let _ = write!(
            svg,
            r##"<text x="{x:.1}" y="{:.1}" font-family="monospace" font-size="10" text-anchor="middle">{}s</text>"##,
            axis_y + 14.0,
            (t - t0) / 1000
        );
        let v = y_min + (y_max - y_min) * frac;
        let _ = write!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" font-family="monospace" font-size="10" text-anchor="end">{v:.4}</text>"##,
            MARGIN_LEFT - 4.0,
            sy(v) + 3.0
        );
    }
    let _ = write!(
        svg,
        r##"<text x="{:.1}" y="{:.1}" font-family="monospace" font-size="10">{y_label}</text>"##,
        MARGIN_LEFT,
        axis_y + 28.0
    );
    svg.push_str("</svg>");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::{label_frame, MetricRow, TimeSeriesFrame};

    fn frame(values: &[f64]) -> LabeledFrame {
        let rows = values
            .iter()
            .enumerate()
            .map(|(i, &value)| MetricRow {
                t_ms: 1000 * i as u64,
                value,
            })
            .collect();
        label_frame(
            "demo__fault",
            Frame::Metric(TimeSeriesFrame {
                response: "demo".into(),
                query: "q".into(),
                step_ms: 1000,
                rows,
            }),
            &[],
        )
        .unwrap()
    }

    #[test]
    fn renders_a_polyline_with_shading() {
        use crate::config::Phase;
        use crate::treatments::TreatmentStatus;
        let record = TreatmentRecord {
            treatment: "fault".into(),
            action: "loss".into(),
            phase: Phase::Fault,
            service: "svc".into(),
            params: Default::default(),
            start_ms: 10_000,
            end_ms: 20_000,
            status: TreatmentStatus::Reverted,
            error: None,
        };
        let values: Vec<f64> = (0..60)
            .map(|i| if (10..=20).contains(&i) { 50.0 } else { 10.0 })
            .collect();
        let svg = frame_svg(&frame(&values), &[record], None);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("<path"));
        assert!(
            svg.contains("opacity=\"0.12\""),
            "fault window shading missing"
        );
        assert!(svg.ends_with("</svg>"));
    }

    #[test]
    fn empty_frame_gets_a_placeholder() {
        let svg = frame_svg(&frame(&[]), &[], None);
        assert!(svg.contains("no data"));
    }

    #[test]
    fn six_hundred_rows_render_quickly() {
        let values: Vec<f64> = (0..600).map(|i| (i % 50) as f64).collect();
        let started = std::time::Instant::now();
        let svg = frame_svg(&frame(&values), &[], None);
        assert!(started.elapsed() < std::time::Duration::from_secs(1));
        assert!(svg.len() > 1000);
    }
}
