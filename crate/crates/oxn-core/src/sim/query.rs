//! Range queries over the simulated telemetry.
//!
//! Supported expression forms: a raw counter name, `rate(name[w])` and
//! `increase(name[w])`. Evaluation walks the exported samples the way the
//! metric backend would, with two documented simplifications: `increase`
//! is the exact counter delta over the window (no rate extrapolation), and
//! a step instant only yields a row when a sample exists within one step
//! behind it (no staleness lookback).

use crate::time::parse_duration;

use super::state::SimSue;
use super::SimError;

/// One point of a range-query result: (epoch ms, value).
pub type MatrixPoint = (u64, f64);

#[derive(Debug, PartialEq)]
enum Expr {
    Raw { name: String },
    Rate { name: String, window_ms: u64 },
    Increase { name: String, window_ms: u64 },
}

fn parse_expr(expr: &str) -> Result<Expr, SimError> {
    let expr = expr.trim();
    let unsupported = || SimError::UnsupportedExpr(expr.to_string());
    for (func, is_rate) in [("rate(", true), ("increase(", false)] {
        if let Some(inner) = expr.strip_prefix(func).and_then(|r| r.strip_suffix(')')) {
            let (name, window) = inner
                .strip_suffix(']')
                .and_then(|r| r.split_once('['))
                .ok_or_else(unsupported)?;
            let window = parse_duration(window.trim()).map_err(|_| unsupported())?;
            if window.is_zero() {
                return Err(unsupported());
            }
            let name = name.trim().to_string();
            if name.is_empty() || !is_metric_name(&name) {
                return Err(unsupported());
            }
            return Ok(if is_rate {
                Expr::Rate {
                    name,
                    window_ms: window.as_millis(),
                }
            } else {
                Expr::Increase {
                    name,
                    window_ms: window.as_millis(),
                }
            });
        }
    }
    if is_metric_name(expr) {
        return Ok(Expr::Raw {
            name: expr.to_string(),
        });
    }
    Err(unsupported())
}

fn is_metric_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .next()
            .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == ':')
}

impl SimSue {
    fn counter_index(&self, name: &str) -> Option<usize> {
        self.counter_names.iter().position(|n| n == name)
    }

    /// Cumulative counter value at `t_ms` as the exporter reported it:
    /// the event count at the latest export instant at or before `t_ms`.
    /// Export instants are `start + k*interval`, k >= 1.
    fn sample_at(&self, service: usize, interval_ms: u64, t_ms: u64) -> Option<(u64, u64)> {
        if t_ms <= self.start_epoch_ms {
            return None;
        }
        let k = (t_ms - self.start_epoch_ms) / interval_ms;
        if k == 0 {
            return None;
        }
        let sample_t = self.start_epoch_ms + k * interval_ms;
        let mut state = self.state.lock().unwrap();
        if !state.buffers.counter_sorted[service] {
            state.buffers.counter_events[service].sort_unstable();
            state.buffers.counter_sorted[service] = true;
        }
        let events = &state.buffers.counter_events[service];
        let count = events.partition_point(|&e| e <= sample_t * 1000) as u64;
        Some((sample_t, count))
    }

    /// Evaluate a range query at `step` resolution over `[t0, t1]` (epoch
    /// ms). A step instant yields a row only when a sample landed within
    /// `(t - step, t]`.
    pub fn query_range(
        &self,
        expr: &str,
        t0_ms: u64,
        t1_ms: u64,
        step_ms: u64,
    ) -> Result<Vec<MatrixPoint>, SimError> {
        let expr = parse_expr(expr)?;
        let step_ms = step_ms.max(1);
        let name = match &expr {
            Expr::Raw { name } | Expr::Rate { name, .. } | Expr::Increase { name, .. } => name,
        };
        let Some(service) = self.counter_index(name) else {
            // unknown series: an empty matrix, like the real backend
            return Ok(Vec::new());
        };
        let service_name = self.topology.services[service].name.clone();
        let interval_ms = self
            .with_service_state(&service_name, |s| s.export_interval_ms())
            .unwrap_or(1000);

        let mut out = Vec::new();
        let mut t = t0_ms;
        while t <= t1_ms {
            if let Some((sample_t, count)) = self.sample_at(service, interval_ms, t) {
                // freshness: the sample must fall within one step of t
                if sample_t + step_ms > t {
                    let value = match &expr {
                        Expr::Raw { .. } => count as f64,
                        Expr::Rate { window_ms, .. } | Expr::Increase { window_ms, .. } => {
                            let earlier = self
                                .sample_at(service, interval_ms, t.saturating_sub(*window_ms))
                                .map(|(_, c)| c)
                                .unwrap_or(0);
                            let delta = count.saturating_sub(earlier) as f64;
                            if matches!(expr, Expr::Rate { .. }) {
                                delta / (*window_ms as f64 / 1000.0)
                            } else {
                                delta
                            }
                        }
                    };
                    out.push((t, value));
                }
            }
            t += step_ms;
        }
        Ok(out)
    }
}
