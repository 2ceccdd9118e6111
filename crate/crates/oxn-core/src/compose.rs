//! Minimal compose-file model.
//!
//! Only the subset the engine acts on is typed: services with image,
//! environment, ports, depends_on, networks and command. Everything else
//! is carried through opaquely and re-rendered untouched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_yaml::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ComposeParseError {
    #[error("compose file is not valid YAML: {0}")]
    Yaml(String),
    #[error("compose service {service:?}: {message}")]
    Service { service: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposeFile {
    #[serde(default)]
    pub services: BTreeMap<String, ServiceDef>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// One service definition. Environment and depends_on are normalized from
/// the short list forms compose permits.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ServiceDef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(
        default,
        skip_serializing_if = "BTreeMap::is_empty",
        deserialize_with = "de_environment"
    )]
    pub environment: BTreeMap<String, String>,
    #[serde(
        default,
        skip_serializing_if = "Vec::is_empty",
        deserialize_with = "de_ports"
    )]
    pub ports: Vec<PortMapping>,
    #[serde(
        default,
        skip_serializing_if = "Vec::is_empty",
        deserialize_with = "de_depends_on"
    )]
    pub depends_on: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub networks: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Value>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// `host:container` port pair; the host side may be omitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PortMapping {
    pub host: Option<u16>,
    pub container: u16,
}

impl Serialize for PortMapping {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.host {
            Some(h) => s.serialize_str(&format!("{}:{}", h, self.container)),
            None => s.serialize_str(&self.container.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for PortMapping {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        parse_port(&v).map_err(serde::de::Error::custom)
    }
}

fn parse_port(v: &Value) -> Result<PortMapping, String> {
    match v {
        Value::Number(n) => {
            let p = n
                .as_u64()
                .filter(|p| *p <= u16::MAX as u64)
                .ok_or("port out of range")?;
            Ok(PortMapping {
                host: None,
                container: p as u16,
            })
        }
        Value::String(s) => {
            let parse_one = |t: &str| t.parse::<u16>().map_err(|_| format!("bad port {t:?}"));
            match s.split_once(':') {
                Some((h, c)) => Ok(PortMapping {
                    host: Some(parse_one(h)?),
                    container: parse_one(c)?,
                }),
                None => Ok(PortMapping {
                    host: None,
                    container: parse_one(s)?,
                }),
            }
        }
        _ => Err("unsupported port form".to_string()),
    }
}

fn de_ports<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<PortMapping>, D::Error> {
    let values: Vec<Value> = Vec::deserialize(d)?;
    values
        .iter()
        .map(|v| parse_port(v).map_err(serde::de::Error::custom))
        .collect()
}

fn de_environment<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> Result<BTreeMap<String, String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum EnvForm {
        Map(BTreeMap<String, Value>),
        List(Vec<String>),
    }
    let mut out = BTreeMap::new();
    match EnvForm::deserialize(d)? {
        EnvForm::Map(map) => {
            for (k, v) in map {
                out.insert(k, scalar_to_string(&v).map_err(serde::de::Error::custom)?);
            }
        }
        EnvForm::List(items) => {
            for item in items {
                match item.split_once('=') {
                    Some((k, v)) => out.insert(k.to_string(), v.to_string()),
                    None => out.insert(item, String::new()),
                };
            }
        }
    }
    Ok(out)
}

fn de_depends_on<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum DependsForm {
        List(Vec<String>),
        Map(BTreeMap<String, Value>),
    }
    Ok(match DependsForm::deserialize(d)? {
        DependsForm::List(v) => v,
        DependsForm::Map(m) => m.into_keys().collect(),
    })
}

fn scalar_to_string(v: &Value) -> Result<String, String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        Value::Null => Ok(String::new()),
        _ => Err("environment values must be scalars".to_string()),
    }
}

/// Parse compose text.
pub fn parse_compose(text: &str) -> Result<ComposeFile, ComposeParseError> {
    serde_yaml::from_str(text).map_err(|e| ComposeParseError::Yaml(e.to_string()))
}

/// Render the file back to YAML. Keys are sorted maps throughout, so the
/// output is deterministic for a given model.
pub fn render_compose(file: &ComposeFile) -> String {
    serde_yaml::to_string(file).expect("compose model serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
services:
  gateway:
    image: example/gateway:1.0
    ports: ["8080:8080"]
    depends_on: [recommendation-service]
    environment:
      LOG_LEVEL: info
  recommendation-service:
    image: example/recommender:1.0
    depends_on:
      datastore:
        condition: service_started
    environment:
      - FEATURE_X=on
      - EMPTY_VAR
  datastore:
    image: example/db:1.0
volumes:
  data: {}
"#;

    #[test]
    fn parses_both_environment_forms() {
        let file = parse_compose(SAMPLE).unwrap();
        assert_eq!(file.services.len(), 3);
        assert_eq!(file.services["gateway"].environment["LOG_LEVEL"], "info");
        let rec = &file.services["recommendation-service"];
        assert_eq!(rec.environment["FEATURE_X"], "on");
        assert_eq!(rec.environment["EMPTY_VAR"], "");
        assert_eq!(rec.depends_on, vec!["datastore".to_string()]);
        assert_eq!(
            file.services["gateway"].ports,
            vec![PortMapping {
                host: Some(8080),
                container: 8080
            }]
        );
        // unknown top-level keys pass through
        assert!(file.extra.contains_key("volumes"));
    }

    #[test]
    fn render_is_deterministic() {
        let file = parse_compose(SAMPLE).unwrap();
        let a = render_compose(&file);
        let b = render_compose(&parse_compose(&a).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_compose("services: [not-a-map").is_err());
    }
}
