//! The treatment action vocabulary: action names, their parameter schemas
//! and the typed representations the rest of the engine works with.

use std::collections::BTreeMap;

use serde_yaml::Value;

use super::ParseError;
use crate::time::{parse_duration, DurationSpec};

/// Which phase of the experiment a treatment runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Applied to the system model before startup.
    Instrumentation,
    /// Injected at runtime while load is running.
    Fault,
}

/// Trace sampling strategies accepted by `otel_traces_sampling_strategy`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    Always,
    Never,
    Probabilistic { rate: f64 },
}

/// Stressor kinds for the `stress` action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stressor {
    Cpu,
    Io,
    Memory,
}

impl Stressor {
    pub fn flag(&self) -> &'static str {
        match self {
            Stressor::Cpu => "--cpu",
            Stressor::Io => "--io",
            Stressor::Memory => "--vm",
        }
    }
}

/// A fully validated treatment action with its parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum TreatmentAction {
    Pause {
        service: String,
        duration: DurationSpec,
    },
    Kill {
        service: String,
        duration: DurationSpec,
    },
    NetworkDelay {
        service: String,
        interface: String,
        duration: DurationSpec,
        delay_ms: u64,
        jitter_ms: u64,
    },
    PacketLoss {
        service: String,
        interface: String,
        duration: DurationSpec,
        loss_percentage: u8,
    },
    PacketCorruption {
        service: String,
        interface: String,
        duration: DurationSpec,
        corrupt_percentage: u8,
    },
    Stress {
        service: String,
        duration: DurationSpec,
        stressor: Stressor,
        workers: u32,
        load_percent: u8,
    },
    MetricSamplingRate {
        service: String,
        export_interval: DurationSpec,
    },
    TracingSamplingRate {
        service: String,
        rate: f64,
    },
    TracingSamplingStrategy {
        service: String,
        strategy: SamplingStrategy,
    },
}

impl TreatmentAction {
    /// The action keyword used in experiment files.
    pub fn action_name(&self) -> &'static str {
        match self {
            TreatmentAction::Pause { .. } => "pause",
            TreatmentAction::Kill { .. } => "kill",
            TreatmentAction::NetworkDelay { .. } => "delay",
            TreatmentAction::PacketLoss { .. } => "loss",
            TreatmentAction::PacketCorruption { .. } => "corrupt",
            TreatmentAction::Stress { .. } => "stress",
            TreatmentAction::MetricSamplingRate { .. } => "otel_metrics_interval",
            TreatmentAction::TracingSamplingRate { .. } => "otel_traces_sampling_rate",
            TreatmentAction::TracingSamplingStrategy { .. } => "otel_traces_sampling_strategy",
        }
    }

    pub fn phase(&self) -> Phase {
        match self {
            TreatmentAction::MetricSamplingRate { .. }
            | TreatmentAction::TracingSamplingRate { .. }
            | TreatmentAction::TracingSamplingStrategy { .. } => Phase::Instrumentation,
            _ => Phase::Fault,
        }
    }

    pub fn target_service(&self) -> &str {
        match self {
            TreatmentAction::Pause { service, .. }
            | TreatmentAction::Kill { service, .. }
            | TreatmentAction::NetworkDelay { service, .. }
            | TreatmentAction::PacketLoss { service, .. }
            | TreatmentAction::PacketCorruption { service, .. }
            | TreatmentAction::Stress { service, .. }
            | TreatmentAction::MetricSamplingRate { service, .. }
            | TreatmentAction::TracingSamplingRate { service, .. }
            | TreatmentAction::TracingSamplingStrategy { service, .. } => service,
        }
    }

    /// Fault duration; instrumentation treatments have none.
    pub fn duration(&self) -> Option<DurationSpec> {
        match self {
            TreatmentAction::Pause { duration, .. }
            | TreatmentAction::Kill { duration, .. }
            | TreatmentAction::NetworkDelay { duration, .. }
            | TreatmentAction::PacketLoss { duration, .. }
            | TreatmentAction::PacketCorruption { duration, .. }
            | TreatmentAction::Stress { duration, .. } => Some(*duration),
            _ => None,
        }
    }

    /// Kill has no recovery; everything else is reverted after its duration.
    pub fn is_revertible(&self) -> bool {
        !matches!(self, TreatmentAction::Kill { .. })
    }

    /// Render the parameters back into the key-value form used in files.
    pub fn to_params(&self) -> BTreeMap<String, Value> {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: Value| {
            map.insert(k.to_string(), v);
        };
        put("service_name", Value::from(self.target_service()));
        if let Some(d) = self.duration() {
            put("duration", Value::from(d.canonical()));
        }
        match self {
            TreatmentAction::NetworkDelay {
                interface,
                delay_ms,
                jitter_ms,
                ..
            } => {
                put("interface", Value::from(interface.clone()));
                put("delay_ms", Value::from(*delay_ms));
                if *jitter_ms > 0 {
                    put("jitter_ms", Value::from(*jitter_ms));
                }
            }
            TreatmentAction::PacketLoss {
                interface,
                loss_percentage,
                ..
            } => {
                put("interface", Value::from(interface.clone()));
                put("loss_percentage", Value::from(*loss_percentage));
            }
            TreatmentAction::PacketCorruption {
                interface,
                corrupt_percentage,
                ..
            } => {
                put("interface", Value::from(interface.clone()));
                put("corrupt_percentage", Value::from(*corrupt_percentage));
            }
            TreatmentAction::Stress {
                stressor,
                workers,
                load_percent,
                ..
            } => {
                let s = match stressor {
                    Stressor::Cpu => "cpu",
                    Stressor::Io => "io",
                    Stressor::Memory => "memory",
                };
                put("stressor", Value::from(s));
                put("workers", Value::from(*workers));
                put("load_percent", Value::from(*load_percent));
            }
            TreatmentAction::MetricSamplingRate {
                export_interval, ..
            } => {
                put(
                    "export_interval_ms",
                    Value::from(export_interval.as_millis()),
                );
            }
            TreatmentAction::TracingSamplingRate { rate, .. } => {
                put("sampling_rate", Value::from(*rate));
            }
            TreatmentAction::TracingSamplingStrategy { strategy, .. } => match strategy {
                SamplingStrategy::Always => put("strategy", Value::from("always")),
                SamplingStrategy::Never => put("strategy", Value::from("never")),
                SamplingStrategy::Probabilistic { rate } => {
                    put("strategy", Value::from("probabilistic"));
                    put("sampling_rate", Value::from(*rate));
                }
            },
            _ => {}
        }
        map
    }
}

/// Reads typed parameters out of the raw key-value map, rejecting unknown
/// keys and out-of-range values. `path` points at `...treatments[i].params`.
pub(super) struct ParamReader<'a> {
    params: &'a BTreeMap<String, Value>,
    path: String,
    taken: Vec<&'static str>,
}

impl<'a> ParamReader<'a> {
    pub fn new(params: &'a BTreeMap<String, Value>, path: String) -> Self {
        ParamReader {
            params,
            path,
            taken: Vec::new(),
        }
    }

    fn key_path(&self, key: &str) -> String {
        format!("{}.{}", self.path, key)
    }

    fn get(&mut self, key: &'static str) -> Option<&'a Value> {
        self.taken.push(key);
        self.params.get(key)
    }

    fn required(&mut self, key: &'static str) -> Result<&'a Value, ParseError> {
        let path = self.key_path(key);
        self.get(key)
            .ok_or_else(|| ParseError::schema(path, "missing required parameter"))
    }

    pub fn string(&mut self, key: &'static str) -> Result<String, ParseError> {
        let path = self.key_path(key);
        match self.required(key)? {
            Value::String(s) => Ok(s.clone()),
            _ => Err(ParseError::schema(path, "expected a string")),
        }
    }

    pub fn duration(&mut self, key: &'static str) -> Result<DurationSpec, ParseError> {
        let path = self.key_path(key);
        match self.required(key)? {
            Value::String(s) => {
                parse_duration(s).map_err(|e| ParseError::schema(path, e.to_string()))
            }
            Value::Number(n) => n
                .as_u64()
                .map(DurationSpec::from_secs)
                .ok_or_else(|| ParseError::schema(path, "expected a non-negative integer")),
            _ => Err(ParseError::schema(path, "expected a duration")),
        }
    }

    pub fn u64(&mut self, key: &'static str) -> Result<u64, ParseError> {
        let path = self.key_path(key);
        match self.required(key)? {
            Value::Number(n) => n
                .as_u64()
                .ok_or_else(|| ParseError::schema(path, "expected a non-negative integer")),
            _ => Err(ParseError::schema(path, "expected an integer")),
        }
    }

    pub fn u64_or(&mut self, key: &'static str, default: u64) -> Result<u64, ParseError> {
        if self.params.contains_key(key) {
            self.u64(key)
        } else {
            self.taken.push(key);
            Ok(default)
        }
    }

    /// Integer percentage, range 0-100.
    pub fn percentage(&mut self, key: &'static str) -> Result<u8, ParseError> {
        let path = self.key_path(key);
        let v = self.u64(key)?;
        if v > 100 {
            return Err(ParseError::schema(path, "percentage must be in 0-100"));
        }
        Ok(v as u8)
    }

    pub fn percentage_or(&mut self, key: &'static str, default: u8) -> Result<u8, ParseError> {
        if self.params.contains_key(key) {
            self.percentage(key)
        } else {
            self.taken.push(key);
            Ok(default)
        }
    }

    /// Probability in [0, 1].
    pub fn probability(&mut self, key: &'static str) -> Result<f64, ParseError> {
        let path = self.key_path(key);
        let v = match self.required(key)? {
            Value::Number(n) => n.as_f64().unwrap_or(f64::NAN),
            _ => return Err(ParseError::schema(path, "expected a number")),
        };
        if !(0.0..=1.0).contains(&v) {
            return Err(ParseError::schema(path, "must be in [0, 1]"));
        }
        Ok(v)
    }

    /// All keys must have been consumed by the action schema.
    pub fn finish(self) -> Result<(), ParseError> {
        for key in self.params.keys() {
            if !self.taken.iter().any(|t| t == key) {
                return Err(ParseError::schema(
                    self.key_path(key),
                    "unknown parameter for this action",
                ));
            }
        }
        Ok(())
    }
}

/// Build the typed action from the file's `action` keyword and params map.
pub(super) fn action_from_raw(
    action: &str,
    params: &BTreeMap<String, Value>,
    path: &str,
) -> Result<TreatmentAction, ParseError> {
    let mut r = ParamReader::new(params, format!("{path}.params"));
    let built = match action {
        "pause" => TreatmentAction::Pause {
            service: r.string("service_name")?,
            duration: r.duration("duration")?,
        },
        "kill" => TreatmentAction::Kill {
            service: r.string("service_name")?,
            duration: r.duration("duration")?,
        },
        "delay" => TreatmentAction::NetworkDelay {
            service: r.string("service_name")?,
            interface: r.string("interface")?,
            duration: r.duration("duration")?,
            delay_ms: r.u64("delay_ms")?,
            jitter_ms: r.u64_or("jitter_ms", 0)?,
        },
        "loss" => TreatmentAction::PacketLoss {
            service: r.string("service_name")?,
            interface: r.string("interface")?,
            duration: r.duration("duration")?,
            loss_percentage: r.percentage("loss_percentage")?,
        },
        "corrupt" => TreatmentAction::PacketCorruption {
            service: r.string("service_name")?,
            interface: r.string("interface")?,
            duration: r.duration("duration")?,
            corrupt_percentage: r.percentage("corrupt_percentage")?,
        },
        "stress" => {
            let service = r.string("service_name")?;
            let duration = r.duration("duration")?;
            let stressor = if params.contains_key("stressor") {
                match r.string("stressor")?.as_str() {
                    "cpu" => Stressor::Cpu,
                    "io" => Stressor::Io,
                    "memory" => Stressor::Memory,
                    other => {
                        return Err(ParseError::schema(
                            format!("{path}.params.stressor"),
                            format!("unknown stressor {other:?} (expected cpu, io or memory)"),
                        ))
                    }
                }
            } else {
                Stressor::Cpu
            };
            TreatmentAction::Stress {
                service,
                duration,
                stressor,
                workers: r.u64_or("workers", 1)? as u32,
                load_percent: r.percentage_or("load_percent", 100)?,
            }
        }
        "otel_metrics_interval" => {
            let service = r.string("service_name")?;
            let ms = r.u64("export_interval_ms")?;
            if ms == 0 {
                return Err(ParseError::schema(
                    format!("{path}.params.export_interval_ms"),
                    "must be at least 1",
                ));
            }
            TreatmentAction::MetricSamplingRate {
                service,
                export_interval: DurationSpec::from_millis(ms),
            }
        }
        "otel_traces_sampling_rate" => TreatmentAction::TracingSamplingRate {
            service: r.string("service_name")?,
            rate: r.probability("sampling_rate")?,
        },
        "otel_traces_sampling_strategy" => {
            let service = r.string("service_name")?;
            let strategy = match r.string("strategy")?.as_str() {
                "always" => SamplingStrategy::Always,
                "never" => SamplingStrategy::Never,
                "probabilistic" => SamplingStrategy::Probabilistic {
                    rate: r.probability("sampling_rate")?,
                },
                other => {
                    return Err(ParseError::schema(
                        format!("{path}.params.strategy"),
                        format!(
                            "unknown strategy {other:?} (expected always, never or probabilistic)"
                        ),
                    ))
                }
            };
            TreatmentAction::TracingSamplingStrategy { service, strategy }
        }
        other => {
            return Err(ParseError::schema(
                format!("{path}.action"),
                format!("unknown action {other:?}"),
            ))
        }
    };
    r.finish()?;
    Ok(built)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn loss_action_from_reference_params() {
        let p = params(&[
            ("service_name", Value::from("recommendation-service")),
            ("duration", Value::from("120s")),
            ("loss_percentage", Value::from(50)),
            ("interface", Value::from("eth0")),
        ]);
        let action = action_from_raw("loss", &p, "experiment.treatments[1]").unwrap();
        assert_eq!(
            action,
            TreatmentAction::PacketLoss {
                service: "recommendation-service".into(),
                interface: "eth0".into(),
                duration: DurationSpec::from_secs(120),
                loss_percentage: 50,
            }
        );
        assert_eq!(action.phase(), Phase::Fault);
    }

    #[test]
    fn percentage_out_of_range_names_the_key() {
        let p = params(&[
            ("service_name", Value::from("svc")),
            ("duration", Value::from("10s")),
            ("loss_percentage", Value::from(150)),
            ("interface", Value::from("eth0")),
        ]);
        let err = action_from_raw("loss", &p, "experiment.treatments[1]").unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("experiment.treatments[1].params.loss_percentage"),
            "{msg}"
        );
        assert!(msg.contains("0-100"), "{msg}");
    }

    #[test]
    fn unknown_parameter_is_rejected() {
        let p = params(&[
            ("service_name", Value::from("svc")),
            ("duration", Value::from("10s")),
            ("pause_hard", Value::from(true)),
        ]);
        let err = action_from_raw("pause", &p, "experiment.treatments[0]").unwrap_err();
        assert!(err.to_string().contains("pause_hard"));
    }

    #[test]
    fn instrumentation_actions_have_no_duration() {
        let p = params(&[
            ("service_name", Value::from("recommendation-service")),
            ("export_interval_ms", Value::from(1000)),
        ]);
        let action = action_from_raw("otel_metrics_interval", &p, "t").unwrap();
        assert_eq!(action.phase(), Phase::Instrumentation);
        assert_eq!(action.duration(), None);
    }

    #[test]
    fn params_round_trip_through_to_params() {
        let p = params(&[
            ("service_name", Value::from("svc")),
            ("duration", Value::from("2m")),
            ("delay_ms", Value::from(100)),
            ("interface", Value::from("eth0")),
        ]);
        let action = action_from_raw("delay", &p, "t").unwrap();
        let rendered = action.to_params();
        let reparsed = action_from_raw("delay", &rendered, "t").unwrap();
        assert_eq!(action, reparsed);
    }
}
