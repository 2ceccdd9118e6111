//! HTTP facade over the simulated SUE: the application routes plus
//! Prometheus-compatible (`/api/v1/query_range`) and Jaeger-compatible
//! (`/api/traces`) query endpoints, wire-format faithful so the real
//! collectors can be pointed at it.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use serde_json::json;

use crate::config::{TaskSpec, Verb};
use crate::minihttp::{Handler, MiniServer, ServerRequest};
use crate::time::Clock;

use super::state::{SimSue, SpanRecord};

pub struct SimServer {
    server: MiniServer,
}

impl SimServer {
    pub fn start(
        sue: Arc<SimSue>,
        clock: Arc<dyn Clock>,
        addr: &str,
    ) -> std::io::Result<SimServer> {
        let rng = Mutex::new(rand_chacha::ChaCha8Rng::seed_from_u64(sue.topology().seed));
        let handler: Arc<Handler> =
            Arc::new(move |req: &ServerRequest| route(&sue, &clock, &rng, req));
        Ok(SimServer {
            server: MiniServer::bind(addr, handler)?,
        })
    }

    pub fn base_url(&self) -> String {
        self.server.base_url()
    }
}

fn route(
    sue: &Arc<SimSue>,
    clock: &Arc<dyn Clock>,
    rng: &Mutex<rand_chacha::ChaCha8Rng>,
    req: &ServerRequest,
) -> (u16, String) {
    match req.path.as_str() {
        "/api/v1/query_range" => query_range(sue, req),
        "/api/traces" => traces(sue, req),
        _ => app_route(sue, clock, rng, req),
    }
}

fn bad_request(message: &str) -> (u16, String) {
    (
        400,
        json!({ "status": "error", "error": message }).to_string(),
    )
}

/// Prometheus wire: `query`, `start`/`end` (unix seconds), `step` (seconds
/// or a duration like `15s`). Values come back as a matrix with string
/// samples.
fn query_range(sue: &Arc<SimSue>, req: &ServerRequest) -> (u16, String) {
    let Some(query) = req.query.get("query") else {
        return bad_request("missing query");
    };
    let (Some(start), Some(end)) = (
        parse_time_ms(req.query.get("start")),
        parse_time_ms(req.query.get("end")),
    ) else {
        return bad_request("missing or bad start/end");
    };
    let step_ms = match req.query.get("step") {
        None => 1000,
        Some(s) => match parse_step_ms(s) {
            Some(v) => v,
            None => return bad_request("bad step"),
        },
    };
    match sue.query_range(query, start, end, step_ms) {
        Err(e) => bad_request(&e.to_string()),
        Ok(points) => {
            let values: Vec<serde_json::Value> = points
                .iter()
                .map(|(t_ms, v)| json!([*t_ms as f64 / 1000.0, format!("{v}")]))
                .collect();
            let result = if values.is_empty() {
                json!([])
            } else {
                json!([{ "metric": { "__name__": metric_name_of(query) }, "values": values }])
            };
            (
                200,
                json!({ "status": "success", "data": { "resultType": "matrix", "result": result } })
                    .to_string(),
            )
        }
    }
}

fn metric_name_of(query: &str) -> String {
    let inner = query
        .trim()
        .trim_start_matches("increase(")
        .trim_start_matches("rate(")
        .trim_end_matches(')');
    inner.split('[').next().unwrap_or(inner).trim().to_string()
}

fn parse_time_ms(value: Option<&String>) -> Option<u64> {
    let v: f64 = value?.parse().ok()?;
    if !v.is_finite() || v < 0.0 {
        return None;
    }
    Some((v * 1000.0).round() as u64)
}

fn parse_step_ms(s: &str) -> Option<u64> {
    if let Ok(v) = s.parse::<f64>() {
        return (v > 0.0).then(|| (v * 1000.0).round() as u64);
    }
    crate::time::parse_duration(s)
        .ok()
        .map(|d| d.as_millis())
        .filter(|&ms| ms > 0)
}

/// Jaeger wire: `service` (required), `operation`, `start`/`end` (µs).
/// Spans are grouped by trace with a process table per trace.
fn traces(sue: &Arc<SimSue>, req: &ServerRequest) -> (u16, String) {
    let Some(service) = req.query.get("service") else {
        return bad_request("parameter 'service' is required");
    };
    let operation = req.query.get("operation").map(String::as_str);
    let start_us: u64 = req
        .query
        .get("start")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let end_us: u64 = req
        .query
        .get("end")
        .and_then(|s| s.parse().ok())
        .unwrap_or(u64::MAX);

    let spans = sue.spans_between(Some(service), operation, start_us, end_us);
    let mut by_trace: BTreeMap<String, Vec<&SpanRecord>> = BTreeMap::new();
    for span in &spans {
        by_trace
            .entry(span.trace_id.clone())
            .or_default()
            .push(span);
    }
    let data: Vec<serde_json::Value> = by_trace
        .iter()
        .map(|(trace_id, spans)| {
            let mut processes = serde_json::Map::new();
            let span_values: Vec<serde_json::Value> = spans
                .iter()
                .map(|s| {
                    let pid = format!("p-{}", s.service);
                    processes.insert(pid.clone(), json!({ "serviceName": s.service, "tags": [] }));
                    json!({
                        "traceID": s.trace_id,
                        "spanID": s.span_id,
                        "operationName": s.operation,
                        "startTime": s.start_us,
                        "duration": s.duration_us,
                        "processID": pid,
                        "references": [],
                        "tags": [{ "key": "error", "type": "bool", "value": s.error }],
                    })
                })
                .collect();
            json!({ "traceID": trace_id, "spans": span_values, "processes": processes })
        })
        .collect();
    (
        200,
        json!({ "data": data, "total": data.len(), "limit": 0, "offset": 0, "errors": null })
            .to_string(),
    )
}

/// Anything else is an application route: serve it through the simulated
/// call graph at the current clock instant.
fn app_route(
    sue: &Arc<SimSue>,
    clock: &Arc<dyn Clock>,
    rng: &Mutex<rand_chacha::ChaCha8Rng>,
    req: &ServerRequest,
) -> (u16, String) {
    let verb = match req.method.as_str() {
        "GET" => Verb::Get,
        "POST" => Verb::Post,
        "PUT" => Verb::Put,
        "DELETE" => Verb::Delete,
        _ => return (400, json!({ "error": "unsupported method" }).to_string()),
    };
    let task = TaskSpec {
        endpoint: req.path.clone(),
        verb,
        params: Default::default(),
        weight: 1,
    };
    let mut rng = rng.lock().unwrap();
    let outcome = sue.handle_request(&task, clock.now_ms() * 1000, &mut rng);
    let body = json!({ "status": outcome.status, "latency_ms": outcome.latency_ms }).to_string();
    (outcome.status, body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loadgen::user_rng;
    use crate::minihttp::{parse_url, request};
    use crate::sim::SimTopology;
    use crate::time::{VirtualClock, VIRTUAL_EPOCH_MS};
    use std::time::Duration;

    fn serve_filled_sim() -> (SimServer, Arc<SimSue>) {
        let sue = Arc::new(SimSue::new(SimTopology::demo(), VIRTUAL_EPOCH_MS));
        let mut rng = user_rng(0, 0);
        let task = TaskSpec {
            endpoint: "/".into(),
            verb: Verb::Get,
            params: Default::default(),
            weight: 1,
        };
        for s in 0..120u64 {
            for r in 0..5 {
                let t_us = (VIRTUAL_EPOCH_MS + s * 1000) * 1000 + r * 200_000;
                sue.handle_request(&task, t_us, &mut rng);
            }
        }
        let clock = VirtualClock::starting_at(VIRTUAL_EPOCH_MS + 120_000);
        let server = SimServer::start(sue.clone(), clock, "127.0.0.1:0").unwrap();
        (server, sue)
    }

    #[test]
    fn prometheus_wire_shape() {
        let (server, _sue) = serve_filled_sim();
        let (endpoint, _) = parse_url(&server.base_url()).unwrap();
        let start = VIRTUAL_EPOCH_MS as f64 / 1000.0;
        let path = format!(
            "/api/v1/query_range?query=app_recommendations_counter_total&start={start}&end={}&step=1",
            start + 120.0
        );
        let resp = request(&endpoint, "GET", &path, &[], None, Duration::from_secs(5)).unwrap();
        assert_eq!(resp.status, 200);
        let body: serde_json::Value = serde_json::from_slice(&resp.body).unwrap();
        assert_eq!(body["status"], "success");
        assert_eq!(body["data"]["resultType"], "matrix");
        let values = body["data"]["result"][0]["values"].as_array().unwrap();
        assert!(!values.is_empty());
        // each sample is [seconds, "value"]
        assert!(values[0][0].is_f64() || values[0][0].is_u64());
        assert!(values[0][1].is_string());
    }

    #[test]
    fn jaeger_wire_shape() {
        let (server, _sue) = serve_filled_sim();
        let (endpoint, _) = parse_url(&server.base_url()).unwrap();
        let start_us = VIRTUAL_EPOCH_MS * 1000;
        let path = format!(
            "/api/traces?service=gateway&start={start_us}&end={}",
            start_us + 120_000_000
        );
        let resp = request(&endpoint, "GET", &path, &[], None, Duration::from_secs(5)).unwrap();
        assert_eq!(resp.status, 200);
        let body: serde_json::Value = serde_json::from_slice(&resp.body).unwrap();
        let data = body["data"].as_array().unwrap();
        assert!(!data.is_empty());
        let first = &data[0];
        let spans = first["spans"].as_array().unwrap();
        assert!(!spans.is_empty());
        let pid = spans[0]["processID"].as_str().unwrap();
        assert_eq!(first["processes"][pid]["serviceName"], "gateway");
    }

    #[test]
    fn missing_service_parameter_is_a_400() {
        let (server, _sue) = serve_filled_sim();
        let (endpoint, _) = parse_url(&server.base_url()).unwrap();
        let resp = request(
            &endpoint,
            "GET",
            "/api/traces",
            &[],
            None,
            Duration::from_secs(5),
        )
        .unwrap();
        assert_eq!(resp.status, 400);
    }

    #[test]
    fn app_route_serves_requests() {
        let (server, _sue) = serve_filled_sim();
        let (endpoint, _) = parse_url(&server.base_url()).unwrap();
        let resp = request(&endpoint, "GET", "/", &[], None, Duration::from_secs(5)).unwrap();
        assert_eq!(resp.status, 200);
    }
}
