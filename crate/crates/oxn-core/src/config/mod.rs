//! Parsing and validation of declarative experiment files.
//!
//! The file is the single self-contained source of truth for a run: it
//! declares the observed response variables, the treatments to apply, the
//! system under experiment and the load shape. The schema is strict —
//! unknown keys are rejected so typos cannot silently change an experiment.

mod actions;
mod raw;
pub mod validate;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use actions::{Phase, SamplingStrategy, Stressor, TreatmentAction};
pub use validate::{ValidationReport, Violation, ViolationCode};

use crate::time::DurationSpec;
use raw::{
    RawExperiment, RawFile, RawLoadgen, RawResponse, RawResponseKind, RawSue, RawTask,
    RawTreatment, RawVerb,
};

/// Default wait for the system under experiment to become ready.
pub const DEFAULT_READINESS_TIMEOUT: DurationSpec = DurationSpec::from_secs(120);

#[derive(Debug, Error)]
pub enum ParseError {
    /// Malformed YAML: the text is not a well-formed document.
    #[error("syntax error: {0}")]
    Syntax(String),
    /// Well-formed YAML that does not match the experiment schema.
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
}

impl ParseError {
    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        ParseError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// The parsed, validated experiment: what to observe, what to inject,
/// what to deploy and how to load it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub responses: Vec<ResponseSpec>,
    pub treatments: Vec<TreatmentSpec>,
    pub sue: SueSpec,
    pub loadgen: LoadgenSpec,
    /// Explicit opt-in for an empty treatment list (a baseline run).
    pub baseline: bool,
    pub detection: DetectionConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseKind {
    Metric,
    Trace,
}

/// What data a response selects: a metric query expression or a trace
/// service/operation selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ResponseQuery {
    Metric {
        expr: String,
    },
    Trace {
        service: String,
        operation: Option<String>,
    },
}

/// One observed response variable and its collection window around a fault.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSpec {
    pub name: String,
    pub query: ResponseQuery,
    pub left_window: DurationSpec,
    pub right_window: DurationSpec,
    /// Collection resolution for metrics; bucket width for trace reduction.
    pub step: DurationSpec,
}

impl ResponseSpec {
    pub fn kind(&self) -> ResponseKind {
        match self.query {
            ResponseQuery::Metric { .. } => ResponseKind::Metric,
            ResponseQuery::Trace { .. } => ResponseKind::Trace,
        }
    }
}

/// One named treatment from the experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentSpec {
    pub name: String,
    pub action: TreatmentAction,
}

impl TreatmentSpec {
    pub fn phase(&self) -> Phase {
        self.action.phase()
    }

    pub fn target_service(&self) -> &str {
        self.action.target_service()
    }
}

/// Orchestration directives for the system under experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SueSpec {
    /// Compose file path, resolved relative to the experiment file.
    pub compose_path: String,
    pub exclude: Vec<String>,
    pub include: Option<Vec<String>>,
    pub readiness_timeout: DurationSpec,
}

/// HTTP verbs supported by load tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verb {
    Get,
    Post,
    Put,
    Delete,
}

impl Verb {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verb::Get => "GET",
            Verb::Post => "POST",
            Verb::Put => "PUT",
            Verb::Delete => "DELETE",
        }
    }

    /// GET/DELETE carry params as a query string, POST/PUT as a JSON body.
    pub fn params_in_query(&self) -> bool {
        matches!(self, Verb::Get | Verb::Delete)
    }
}

/// One request template executed by virtual users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub endpoint: String,
    pub verb: Verb,
    pub params: BTreeMap<String, serde_yaml::Value>,
    pub weight: u32,
}

/// One load stage: ramp to `users` at `spawn_rate`, then hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub duration: DurationSpec,
    pub users: u32,
    pub spawn_rate: f64,
}

/// The workload description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadgenSpec {
    pub run_time: DurationSpec,
    pub base_url: String,
    pub stages: Vec<StageSpec>,
    pub tasks: Vec<TaskSpec>,
}

/// Threshold detector settings (`detection:` block, defaults when absent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    /// Flag a row when it deviates from the baseline mean by more than
    /// `z` standard deviations.
    pub z: f64,
    /// Require this many consecutive flagged rows inside the fault window.
    pub k: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig { z: 3.0, k: 3 }
    }
}

/// Parse experiment file text into a typed spec with all defaults filled.
///
/// Unknown keys anywhere in the document are schema errors.
pub fn parse_experiment(text: &str) -> Result<ExperimentSpec, ParseError> {
    // A first pass as plain YAML separates syntax problems from schema ones.
    let _: serde_yaml::Value =
        serde_yaml::from_str(text).map_err(|e| ParseError::Syntax(e.to_string()))?;
    let file: RawFile =
        serde_yaml::from_str(text).map_err(|e| ParseError::schema("experiment", e.to_string()))?;
    spec_from_raw(file.experiment)
}

fn spec_from_raw(raw: RawExperiment) -> Result<ExperimentSpec, ParseError> {
    let mut responses = Vec::with_capacity(raw.responses.len());
    for (i, entry) in raw.responses.iter().enumerate() {
        let path = format!("experiment.responses[{i}]");
        let (name, body) = single_entry(entry, &path)?;
        responses.push(response_from_raw(name, body, &path)?);
    }
    if responses.is_empty() {
        return Err(ParseError::schema(
            "experiment.responses",
            "at least one response is required",
        ));
    }
    check_unique_names(
        responses.iter().map(|r| r.name.as_str()),
        "experiment.responses",
    )?;

    let mut treatments = Vec::with_capacity(raw.treatments.len());
    for (i, entry) in raw.treatments.iter().enumerate() {
        let path = format!("experiment.treatments[{i}]");
        let (name, body) = single_entry(entry, &path)?;
        treatments.push(treatment_from_raw(name, body, &path)?);
    }
    check_unique_names(
        treatments.iter().map(|t| t.name.as_str()),
        "experiment.treatments",
    )?;

    if treatments.is_empty() && !raw.baseline {
        return Err(ParseError::schema(
            "experiment.treatments",
            "at least one treatment is required (or set `baseline: true` for an empty-treatment run)",
        ));
    }
    if raw.baseline && !treatments.is_empty() {
        return Err(ParseError::schema(
            "experiment.baseline",
            "`baseline: true` requires an empty treatment list",
        ));
    }

    let sue = sue_from_raw(&raw.sue)?;
    let loadgen = loadgen_from_raw(&raw.loadgen)?;

    let detection = match &raw.detection {
        None => DetectionConfig::default(),
        Some(d) => {
            let z = d.z.unwrap_or(3.0);
            if !z.is_finite() || z <= 0.0 {
                return Err(ParseError::schema(
                    "experiment.detection.z",
                    "must be a positive number",
                ));
            }
            let k = d.k.unwrap_or(3);
            if k == 0 {
                return Err(ParseError::schema(
                    "experiment.detection.k",
                    "must be at least 1",
                ));
            }
            DetectionConfig { z, k: k as usize }
        }
    };

    Ok(ExperimentSpec {
        responses,
        treatments,
        sue,
        loadgen,
        baseline: raw.baseline,
        detection,
    })
}

fn single_entry<'a, T>(
    map: &'a BTreeMap<String, T>,
    path: &str,
) -> Result<(&'a str, &'a T), ParseError> {
    if map.len() != 1 {
        return Err(ParseError::schema(
            path,
            format!(
                "expected a single `name: {{...}}` mapping, found {} keys",
                map.len()
            ),
        ));
    }
    let (name, body) = map.iter().next().expect("len checked");
    check_name(name, path)?;
    Ok((name.as_str(), body))
}

/// Names become file and journal identifiers, so keep them to a safe set.
fn check_name(name: &str, path: &str) -> Result<(), ParseError> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !name.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(ParseError::schema(
            path,
            format!("invalid name {name:?}: use letters, digits, `_`, `-`, `.`"),
        ))
    }
}

fn check_unique_names<'a>(
    names: impl Iterator<Item = &'a str>,
    path: &str,
) -> Result<(), ParseError> {
    let mut seen = BTreeSet::new();
    for name in names {
        if !seen.insert(name) {
            return Err(ParseError::schema(path, format!("duplicate name {name:?}")));
        }
    }
    Ok(())
}

fn response_from_raw(
    name: &str,
    body: &RawResponse,
    path: &str,
) -> Result<ResponseSpec, ParseError> {
    let query = match body.kind {
        RawResponseKind::Metric => {
            if body.service_name.is_some() || body.operation.is_some() {
                return Err(ParseError::schema(
                    format!("{path}.service_name"),
                    "not valid for metric responses",
                ));
            }
            let expr = body.metric_name.clone().ok_or_else(|| {
                ParseError::schema(
                    format!("{path}.metric_name"),
                    "required for metric responses",
                )
            })?;
            ResponseQuery::Metric { expr }
        }
        RawResponseKind::Trace => {
            if body.metric_name.is_some() {
                return Err(ParseError::schema(
                    format!("{path}.metric_name"),
                    "not valid for trace responses",
                ));
            }
            let service = body.service_name.clone().ok_or_else(|| {
                ParseError::schema(
                    format!("{path}.service_name"),
                    "required for trace responses",
                )
            })?;
            ResponseQuery::Trace {
                service,
                operation: body.operation.clone(),
            }
        }
    };
    let step = body.step.unwrap_or_else(|| DurationSpec::from_secs(1));
    if matches!(body.kind, RawResponseKind::Metric) && step.as_millis() < 1000 {
        return Err(ParseError::schema(
            format!("{path}.step"),
            "metric step must be at least 1 second",
        ));
    }
    if step.is_zero() {
        return Err(ParseError::schema(
            format!("{path}.step"),
            "step must be positive",
        ));
    }
    Ok(ResponseSpec {
        name: name.to_string(),
        query,
        left_window: body.left_window,
        right_window: body.right_window,
        step,
    })
}

fn treatment_from_raw(
    name: &str,
    body: &RawTreatment,
    path: &str,
) -> Result<TreatmentSpec, ParseError> {
    let action = actions::action_from_raw(&body.action, &body.params, path)?;
    if action.phase() == Phase::Fault && action.duration().is_none() {
        return Err(ParseError::schema(
            format!("{path}.params.duration"),
            "fault treatments need a duration",
        ));
    }
    Ok(TreatmentSpec {
        name: name.to_string(),
        action,
    })
}

fn sue_from_raw(raw: &RawSue) -> Result<SueSpec, ParseError> {
    if let Some(include) = &raw.include {
        for name in include {
            if raw.exclude.contains(name) {
                return Err(ParseError::schema(
                    "experiment.sue.include",
                    format!("service {name:?} is both included and excluded"),
                ));
            }
        }
    }
    Ok(SueSpec {
        compose_path: raw.compose.clone(),
        exclude: raw.exclude.clone(),
        include: raw.include.clone(),
        readiness_timeout: raw.readiness_timeout.unwrap_or(DEFAULT_READINESS_TIMEOUT),
    })
}

fn loadgen_from_raw(raw: &RawLoadgen) -> Result<LoadgenSpec, ParseError> {
    if !(raw.base_url.starts_with("http://") || raw.base_url.starts_with("https://")) {
        return Err(ParseError::schema(
            "experiment.loadgen.base_url",
            "must be an absolute http(s) URL",
        ));
    }
    let mut stage_sum: u64 = 0;
    let mut stages = Vec::with_capacity(raw.stages.len());
    for (i, s) in raw.stages.iter().enumerate() {
        if s.spawn_rate <= 0.0 || !s.spawn_rate.is_finite() {
            return Err(ParseError::schema(
                format!("experiment.loadgen.stages[{i}].spawn_rate"),
                "must be positive",
            ));
        }
        stage_sum += s.duration.as_millis();
        stages.push(StageSpec {
            duration: s.duration,
            users: s.users,
            spawn_rate: s.spawn_rate,
        });
    }
    if stage_sum > raw.run_time.as_millis() {
        return Err(ParseError::schema(
            "experiment.loadgen.stages",
            format!(
                "stage durations sum to {}ms which exceeds run_time {}ms",
                stage_sum,
                raw.run_time.as_millis()
            ),
        ));
    }
    if raw.tasks.is_empty() {
        return Err(ParseError::schema(
            "experiment.loadgen.tasks",
            "at least one task is required",
        ));
    }
    let mut tasks = Vec::with_capacity(raw.tasks.len());
    for (i, t) in raw.tasks.iter().enumerate() {
        tasks.push(task_from_raw(t, &format!("experiment.loadgen.tasks[{i}]"))?);
    }
    Ok(LoadgenSpec {
        run_time: raw.run_time,
        base_url: raw.base_url.clone(),
        stages,
        tasks,
    })
}

fn task_from_raw(raw: &RawTask, path: &str) -> Result<TaskSpec, ParseError> {
    if !raw.endpoint.starts_with('/') {
        return Err(ParseError::schema(
            format!("{path}.endpoint"),
            "must begin with '/'",
        ));
    }
    let weight = raw.weight.unwrap_or(1);
    if weight == 0 {
        return Err(ParseError::schema(
            format!("{path}.weight"),
            "must be positive",
        ));
    }
    for (k, v) in &raw.params {
        let scalar = matches!(
            v,
            serde_yaml::Value::Null
                | serde_yaml::Value::Bool(_)
                | serde_yaml::Value::Number(_)
                | serde_yaml::Value::String(_)
        );
        if !scalar {
            return Err(ParseError::schema(
                format!("{path}.params.{k}"),
                "task parameters must be scalars",
            ));
        }
    }
    let verb = match raw.verb {
        RawVerb::Get => Verb::Get,
        RawVerb::Post => Verb::Post,
        RawVerb::Put => Verb::Put,
        RawVerb::Delete => Verb::Delete,
    };
    Ok(TaskSpec {
        endpoint: raw.endpoint.clone(),
        verb,
        params: raw.params.clone(),
        weight,
    })
}

/// Render a spec back into the canonical experiment-file form.
///
/// Parsing the output yields a spec equal to the input.
pub fn to_yaml(spec: &ExperimentSpec) -> String {
    let raw = raw_from_spec(spec);
    serde_yaml::to_string(&RawFile { experiment: raw }).expect("spec serializes")
}

fn raw_from_spec(spec: &ExperimentSpec) -> RawExperiment {
    let responses = spec
        .responses
        .iter()
        .map(|r| {
            let (kind, metric_name, service_name, operation) = match &r.query {
                ResponseQuery::Metric { expr } => {
                    (RawResponseKind::Metric, Some(expr.clone()), None, None)
                }
                ResponseQuery::Trace { service, operation } => (
                    RawResponseKind::Trace,
                    None,
                    Some(service.clone()),
                    operation.clone(),
                ),
            };
            let body = RawResponse {
                kind,
                metric_name,
                service_name,
                operation,
                left_window: r.left_window,
                right_window: r.right_window,
                step: Some(r.step),
            };
            BTreeMap::from([(r.name.clone(), body)])
        })
        .collect();
    let treatments = spec
        .treatments
        .iter()
        .map(|t| {
            let body = RawTreatment {
                action: t.action.action_name().to_string(),
                params: t.action.to_params(),
            };
            BTreeMap::from([(t.name.clone(), body)])
        })
        .collect();
    RawExperiment {
        responses,
        treatments,
        sue: RawSue {
            compose: spec.sue.compose_path.clone(),
            exclude: spec.sue.exclude.clone(),
            include: spec.sue.include.clone(),
            readiness_timeout: Some(spec.sue.readiness_timeout),
        },
        loadgen: RawLoadgen {
            run_time: spec.loadgen.run_time,
            base_url: spec.loadgen.base_url.clone(),
            stages: spec
                .loadgen
                .stages
                .iter()
                .map(|s| raw::RawStage {
                    duration: s.duration,
                    users: s.users,
                    spawn_rate: s.spawn_rate,
                })
                .collect(),
            tasks: spec
                .loadgen
                .tasks
                .iter()
                .map(|t| RawTask {
                    endpoint: t.endpoint.clone(),
                    verb: match t.verb {
                        Verb::Get => RawVerb::Get,
                        Verb::Post => RawVerb::Post,
                        Verb::Put => RawVerb::Put,
                        Verb::Delete => RawVerb::Delete,
                    },
                    params: t.params.clone(),
                    weight: Some(t.weight),
                })
                .collect(),
        },
        baseline: spec.baseline,
        detection: Some(raw::RawDetection {
            z: Some(spec.detection.z),
            k: Some(spec.detection.k as u32),
        }),
    }
}

/// The recommendation-service packet-loss scenario used as the shared
/// fixture across the crate's tests.
#[cfg(test)]
pub(crate) const REFERENCE_EXPERIMENT: &str = r#"
experiment:
  responses:
    - recommendations_per_min:
        type: metric
        metric_name: increase(app_recommendations_counter_total[1m])
        left_window: 240s
        right_window: 240s
        step: 1
  treatments:
    - change_metric_interval:
        action: otel_metrics_interval
        params: {
          service_name: recommendation-service,
          export_interval_ms: 1000
        }
    - package_loss_treatment:
        action: loss
        params: {
          service_name: recommendation-service,
          duration: 120s,
          loss_percentage: 50,
          interface: eth0,
        }
  sue:
    compose: sue/docker-compose.yml
    exclude: [loadgenerator]
  loadgen:
    run_time: 10m
    base_url: http://localhost:8080
    stages:
    - {duration: 600, users: 50, spawn_rate: 25}
    tasks:
    - { endpoint: /, verb: get, params: { } }
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_reference_experiment() {
        let spec = parse_experiment(REFERENCE_EXPERIMENT).unwrap();
        assert_eq!(spec.responses.len(), 1);
        let r = &spec.responses[0];
        assert_eq!(r.name, "recommendations_per_min");
        assert_eq!(r.kind(), ResponseKind::Metric);
        assert_eq!(r.step, DurationSpec::from_secs(1));
        assert_eq!(r.left_window, DurationSpec::from_secs(240));
        assert_eq!(r.right_window, DurationSpec::from_secs(240));

        assert_eq!(spec.treatments.len(), 2);
        assert_eq!(spec.treatments[0].phase(), Phase::Instrumentation);
        assert_eq!(spec.treatments[1].phase(), Phase::Fault);
        assert_eq!(
            spec.treatments[1].target_service(),
            "recommendation-service"
        );

        assert_eq!(spec.sue.exclude, vec!["loadgenerator".to_string()]);
        assert_eq!(spec.sue.readiness_timeout, DurationSpec::from_secs(120));

        assert_eq!(spec.loadgen.run_time, DurationSpec::from_secs(600));
        assert_eq!(spec.loadgen.stages.len(), 1);
        assert_eq!(spec.loadgen.stages[0].users, 50);
        assert_eq!(spec.loadgen.stages[0].spawn_rate, 25.0);
        assert_eq!(spec.loadgen.tasks.len(), 1);
        assert_eq!(spec.loadgen.tasks[0].endpoint, "/");
        assert_eq!(spec.loadgen.tasks[0].verb, Verb::Get);
    }

    #[test]
    fn empty_treatments_need_baseline_flag() {
        let text = REFERENCE_EXPERIMENT
            .replace("  treatments:", "  baseline: true\n  treatments_removed:");
        // removing treatments entirely is a schema error (missing field)
        assert!(parse_experiment(&text).is_err());

        let baseline = r#"
experiment:
  baseline: true
  responses:
    - r1:
        type: metric
        metric_name: some_counter_total
        left_window: 10s
        right_window: 10s
        step: 1
  treatments: []
  sue:
    compose: compose.yml
  loadgen:
    run_time: 60s
    base_url: http://localhost:8080
    tasks:
    - { endpoint: /, verb: get }
"#;
        let spec = parse_experiment(baseline).unwrap();
        assert!(spec.baseline);
        assert!(spec.treatments.is_empty());
    }

    #[test]
    fn loss_percentage_out_of_range_is_schema_error_with_path() {
        let text = REFERENCE_EXPERIMENT.replace("loss_percentage: 50", "loss_percentage: 150");
        let err = parse_experiment(&text).unwrap_err();
        match err {
            ParseError::Schema { path, message } => {
                assert_eq!(path, "experiment.treatments[1].params.loss_percentage");
                assert!(message.contains("0-100"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = REFERENCE_EXPERIMENT.replace("step: 1", "step: 1\n        stepp: 2");
        let err = parse_experiment(&text).unwrap_err();
        assert!(matches!(err, ParseError::Schema { .. }), "{err}");
        assert!(err.to_string().contains("stepp"), "{err}");
    }

    #[test]
    fn malformed_yaml_is_syntax_error() {
        let err = parse_experiment("experiment: [unbalanced").unwrap_err();
        assert!(matches!(err, ParseError::Syntax(_)));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let text =
            REFERENCE_EXPERIMENT.replace("change_metric_interval:", "package_loss_treatment:");
        let err = parse_experiment(&text).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn stage_sum_must_fit_run_time() {
        let text = REFERENCE_EXPERIMENT.replace("run_time: 10m", "run_time: 9m");
        let err = parse_experiment(&text).unwrap_err();
        assert!(err.to_string().contains("exceeds run_time"), "{err}");
    }

    #[test]
    fn serialize_parse_is_idempotent() {
        let spec = parse_experiment(REFERENCE_EXPERIMENT).unwrap();
        let rendered = to_yaml(&spec);
        let reparsed = parse_experiment(&rendered).unwrap();
        assert_eq!(spec, reparsed);
        // and the canonical form is a fixed point
        assert_eq!(rendered, to_yaml(&reparsed));
    }

    #[test]
    fn trace_response_selector() {
        let text = REFERENCE_EXPERIMENT.replace(
            "        type: metric\n        metric_name: increase(app_recommendations_counter_total[1m])\n",
            "        type: trace\n        service_name: gateway\n        operation: \"GET /\"\n",
        );
        let spec = parse_experiment(&text).unwrap();
        assert_eq!(
            spec.responses[0].query,
            ResponseQuery::Trace {
                service: "gateway".into(),
                operation: Some("GET /".into())
            }
        );
    }
}
