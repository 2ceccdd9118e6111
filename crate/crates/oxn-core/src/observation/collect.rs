//! Collection backends: the in-process simulated SUE and HTTP clients for
//! Prometheus- and Jaeger-compatible APIs. Transient failures are retried
//! three times.

use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::config::{ResponseQuery, ResponseSpec};
use crate::minihttp::{parse_url, request, url_encode, Endpoint};
use crate::sim::SimSue;

use super::{Frame, MetricRow, TimeSeriesFrame, TraceFrame, TraceRow};

#[derive(Debug, Error)]
pub enum CollectError {
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("unsupported query: {0}")]
    UnsupportedQuery(String),
    #[error("response is a {actual} response, expected {expected}")]
    WrongKind {
        expected: &'static str,
        actual: &'static str,
    },
}

impl CollectError {
    fn transient(&self) -> bool {
        matches!(self, CollectError::BackendUnreachable(_))
    }
}

pub trait MetricBackend {
    fn query_range(
        &self,
        expr: &str,
        t0_ms: u64,
        t1_ms: u64,
        step_ms: u64,
    ) -> Result<Vec<(u64, f64)>, CollectError>;
}

pub trait TraceBackend {
    fn find_spans(
        &self,
        service: &str,
        operation: Option<&str>,
        t0_us: u64,
        t1_us: u64,
    ) -> Result<Vec<TraceRow>, CollectError>;
}

const RETRIES: usize = 3;
const RETRY_DELAY: Duration = Duration::from_millis(200);

fn with_retries<T>(mut call: impl FnMut() -> Result<T, CollectError>) -> Result<T, CollectError> {
    let mut last = None;
    for attempt in 0..RETRIES {
        match call() {
            Ok(v) => return Ok(v),
            Err(e) if e.transient() => {
                if attempt + 1 < RETRIES {
                    std::thread::sleep(RETRY_DELAY);
                }
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Issue a range query for a metric response over `[t0, t1]` at the
/// response's step. An empty result is a frame with zero rows, not an
/// error; the caller flags it.
pub fn collect_metric(
    backend: &dyn MetricBackend,
    response: &ResponseSpec,
    window: (u64, u64),
) -> Result<TimeSeriesFrame, CollectError> {
    let ResponseQuery::Metric { expr } = &response.query else {
        return Err(CollectError::WrongKind {
            expected: "metric",
            actual: "trace",
        });
    };
    let step_ms = response.step.as_millis();
    let points = with_retries(|| backend.query_range(expr, window.0, window.1, step_ms))?;
    Ok(TimeSeriesFrame {
        response: response.name.clone(),
        query: expr.clone(),
        step_ms,
        rows: points
            .into_iter()
            .map(|(t_ms, value)| MetricRow { t_ms, value })
            .collect(),
    })
}

/// Fetch the spans of a trace response's service/operation within the
/// window (bounds in epoch ms, matched against span starts).
pub fn collect_traces(
    backend: &dyn TraceBackend,
    response: &ResponseSpec,
    window: (u64, u64),
) -> Result<TraceFrame, CollectError> {
    let ResponseQuery::Trace { service, operation } = &response.query else {
        return Err(CollectError::WrongKind {
            expected: "trace",
            actual: "metric",
        });
    };
    let rows = with_retries(|| {
        backend.find_spans(
            service,
            operation.as_deref(),
            window.0 * 1000,
            window.1 * 1000,
        )
    })?;
    let selector = match operation {
        Some(op) => format!("{service}:{op}"),
        None => service.clone(),
    };
    Ok(TraceFrame {
        response: response.name.clone(),
        selector,
        rows,
    })
}

/// Collect whichever kind the response declares.
pub fn collect_response(
    metric: &dyn MetricBackend,
    trace: &dyn TraceBackend,
    response: &ResponseSpec,
    window: (u64, u64),
) -> Result<Frame, CollectError> {
    match response.query {
        ResponseQuery::Metric { .. } => collect_metric(metric, response, window).map(Frame::Metric),
        ResponseQuery::Trace { .. } => collect_traces(trace, response, window).map(Frame::Trace),
    }
}

impl MetricBackend for Arc<SimSue> {
    fn query_range(
        &self,
        expr: &str,
        t0_ms: u64,
        t1_ms: u64,
        step_ms: u64,
    ) -> Result<Vec<(u64, f64)>, CollectError> {
        SimSue::query_range(self, expr, t0_ms, t1_ms, step_ms)
            .map_err(|e| CollectError::UnsupportedQuery(e.to_string()))
    }
}

impl TraceBackend for Arc<SimSue> {
    fn find_spans(
        &self,
        service: &str,
        operation: Option<&str>,
        t0_us: u64,
        t1_us: u64,
    ) -> Result<Vec<TraceRow>, CollectError> {
        Ok(self
            .spans_between(Some(service), operation, t0_us, t1_us)
            .into_iter()
            .map(|s| TraceRow {
                trace_id: s.trace_id,
                span_id: s.span_id,
                service: s.service,
                operation: s.operation,
                start_us: s.start_us,
                duration_us: s.duration_us,
                status: if s.error { "error".into() } else { "ok".into() },
            })
            .collect())
    }
}

/// Prometheus-compatible HTTP metric backend.
pub struct HttpMetricBackend {
    endpoint: Endpoint,
    timeout: Duration,
}

impl HttpMetricBackend {
    pub fn new(base_url: &str, timeout: Duration) -> Result<HttpMetricBackend, CollectError> {
        let (endpoint, _) =
            parse_url(base_url).map_err(|e| CollectError::BackendUnreachable(e.to_string()))?;
        Ok(HttpMetricBackend { endpoint, timeout })
    }
}

impl MetricBackend for HttpMetricBackend {
    fn query_range(
        &self,
        expr: &str,
        t0_ms: u64,
        t1_ms: u64,
        step_ms: u64,
    ) -> Result<Vec<(u64, f64)>, CollectError> {
        let path = format!(
            "/api/v1/query_range?query={}&start={}&end={}&step={}",
            url_encode(expr),
            t0_ms as f64 / 1000.0,
            t1_ms as f64 / 1000.0,
            step_ms as f64 / 1000.0,
        );
        let resp = request(&self.endpoint, "GET", &path, &[], None, self.timeout)
            .map_err(|e| CollectError::BackendUnreachable(e.to_string()))?;
        if resp.status != 200 {
            return Err(CollectError::UnsupportedQuery(format!(
                "query_range returned {}: {}",
                resp.status,
                resp.body_str().trim()
            )));
        }
        let body: serde_json::Value = serde_json::from_slice(&resp.body)
            .map_err(|e| CollectError::BackendUnreachable(format!("bad response body: {e}")))?;
        if body["status"] != "success" {
            return Err(CollectError::UnsupportedQuery(body["error"].to_string()));
        }
        let result = body["data"]["result"]
            .as_array()
            .cloned()
            .unwrap_or_default();
        if result.is_empty() {
            return Ok(Vec::new());
        }
        if result.len() > 1 {
            return Err(CollectError::UnsupportedQuery(format!(
                "query selects {} series; response queries must select exactly one",
                result.len()
            )));
        }
        let values = result[0]["values"].as_array().cloned().unwrap_or_default();
        let mut points = Vec::with_capacity(values.len());
        for pair in values {
            let t = pair[0]
                .as_f64()
                .ok_or_else(|| CollectError::UnsupportedQuery("bad sample timestamp".into()))?;
            let v: f64 = pair[1]
                .as_str()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CollectError::UnsupportedQuery("bad sample value".into()))?;
            points.push(((t * 1000.0).round() as u64, v));
        }
        Ok(points)
    }
}

/// Jaeger-compatible HTTP trace backend.
pub struct HttpTraceBackend {
    endpoint: Endpoint,
    timeout: Duration,
}

impl HttpTraceBackend {
    pub fn new(base_url: &str, timeout: Duration) -> Result<HttpTraceBackend, CollectError> {
        let (endpoint, _) =
            parse_url(base_url).map_err(|e| CollectError::BackendUnreachable(e.to_string()))?;
        Ok(HttpTraceBackend { endpoint, timeout })
    }
}

impl TraceBackend for HttpTraceBackend {
    fn find_spans(
        &self,
        service: &str,
        operation: Option<&str>,
        t0_us: u64,
        t1_us: u64,
    ) -> Result<Vec<TraceRow>, CollectError> {
        let mut path = format!(
            "/api/traces?service={}&start={t0_us}&end={t1_us}",
            url_encode(service)
        );
        if let Some(op) = operation {
            path.push_str(&format!("&operation={}", url_encode(op)));
        }
        let resp = request(&self.endpoint, "GET", &path, &[], None, self.timeout)
            .map_err(|e| CollectError::BackendUnreachable(e.to_string()))?;
        if resp.status != 200 {
            return Err(CollectError::UnsupportedQuery(format!(
                "trace query returned {}: {}",
                resp.status,
                resp.body_str().trim()
            )));
        }
        let body: serde_json::Value = serde_json::from_slice(&resp.body)
            .map_err(|e| CollectError::BackendUnreachable(format!("bad response body: {e}")))?;
        let mut rows = Vec::new();
        for trace in body["data"].as_array().cloned().unwrap_or_default() {
            let processes = &trace["processes"];
            for span in trace["spans"].as_array().cloned().unwrap_or_default() {
                let pid = span["processID"].as_str().unwrap_or("");
                let span_service = processes[pid]["serviceName"].as_str().unwrap_or("");
                // trace backends return whole traces; keep only the
                // selected service within the window
                if span_service != service {
                    continue;
                }
                let start_us = span["startTime"].as_u64().unwrap_or(0);
                if start_us < t0_us || start_us > t1_us {
                    continue;
                }
                let operation_name = span["operationName"].as_str().unwrap_or("").to_string();
                if let Some(op) = operation {
                    if operation_name != op {
                        continue;
                    }
                }
                let error = span["tags"]
                    .as_array()
                    .map(|tags| {
                        tags.iter().any(|t| {
                            t["key"] == "error" && (t["value"] == true || t["value"] == "true")
                        })
                    })
                    .unwrap_or(false);
                rows.push(TraceRow {
                    trace_id: span["traceID"].as_str().unwrap_or("").to_string(),
                    span_id: span["spanID"].as_str().unwrap_or("").to_string(),
                    service: span_service.to_string(),
                    operation: operation_name,
                    start_us,
                    duration_us: span["duration"].as_u64().unwrap_or(0),
                    status: if error { "error".into() } else { "ok".into() },
                });
            }
        }
        rows.sort_by(|a, b| {
            (a.start_us, &a.trace_id, &a.span_id).cmp(&(b.start_us, &b.trace_id, &b.span_id))
        });
        Ok(rows)
    }
}
