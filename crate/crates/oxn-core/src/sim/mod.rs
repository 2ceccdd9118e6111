//! Deterministic in-process stand-in for a system under experiment.
//!
//! Serves the load generator's requests by walking a service call graph,
//! reacts to the same treatments as a real deployment (pause, kill,
//! netem-style delay/loss/corruption, stress, sampling configuration) and
//! answers Prometheus- and Jaeger-compatible queries over its buffered
//! telemetry. Same topology, seed, load and schedule give byte-identical
//! telemetry.

mod query;
mod runtime;
mod server;
mod state;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use query::MatrixPoint;
pub use runtime::SimRuntime;
pub use server::SimServer;
pub use state::{SimSue, SpanRecord, CLIENT_TIMEOUT_MS};

use crate::orchestrator::SueModel;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("unsupported query expression {0:?} (expected a counter name, rate(name[w]) or increase(name[w]))")]
    UnsupportedExpr(String),
}

/// One simulated service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimServiceDef {
    pub name: String,
    /// Own processing latency per request, before jitter and treatments.
    #[serde(default = "default_latency")]
    pub base_latency_ms: f64,
    /// Intrinsic failure probability per request.
    #[serde(default)]
    pub error_rate: f64,
    /// Services this one calls, in order, once per request.
    #[serde(default)]
    pub downstream: Vec<String>,
    /// Request counter metric name; defaults to `app_<name>_requests_total`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counter: Option<String>,
}

fn default_latency() -> f64 {
    10.0
}

impl SimServiceDef {
    pub fn counter_name(&self) -> String {
        self.counter
            .clone()
            .unwrap_or_else(|| format!("app_{}_requests_total", self.name.replace(['-', '.'], "_")))
    }
}

/// The simulated call graph. Acyclic; requests enter at `entry`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTopology {
    pub services: Vec<SimServiceDef>,
    pub entry: String,
    #[serde(default)]
    pub seed: u64,
}

impl SimTopology {
    /// The built-in three-service demo topology:
    /// gateway -> recommendation-service -> datastore.
    pub fn demo() -> SimTopology {
        SimTopology {
            services: vec![
                SimServiceDef {
                    name: "gateway".into(),
                    base_latency_ms: 30.0,
                    error_rate: 0.0,
                    downstream: vec!["recommendation-service".into()],
                    counter: None,
                },
                SimServiceDef {
                    name: "recommendation-service".into(),
                    base_latency_ms: 50.0,
                    error_rate: 0.0,
                    downstream: vec!["datastore".into()],
                    counter: Some("app_recommendations_counter_total".into()),
                },
                SimServiceDef {
                    name: "datastore".into(),
                    base_latency_ms: 20.0,
                    error_rate: 0.0,
                    downstream: vec![],
                    counter: None,
                },
            ],
            entry: "gateway".into(),
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<SimTopology, SimError> {
        let topology: SimTopology =
            serde_json::from_str(text).map_err(|e| SimError::Topology(e.to_string()))?;
        topology.validate()?;
        Ok(topology)
    }

    /// Derive a topology from a filtered service model: `depends_on` edges
    /// become calls, the entry point is the (unique) service nothing
    /// depends on — preferring one with a published port.
    pub fn derive_from_model(model: &SueModel) -> Result<SimTopology, SimError> {
        let names = model.service_names();
        if names.is_empty() {
            return Err(SimError::Topology("service model is empty".into()));
        }
        let mut called: BTreeSet<String> = BTreeSet::new();
        let mut services = Vec::new();
        for name in &names {
            let def = model.service(name).expect("name from model");
            for dep in &def.depends_on {
                called.insert(dep.clone());
            }
            services.push(SimServiceDef {
                name: name.clone(),
                base_latency_ms: default_latency(),
                error_rate: 0.0,
                downstream: def.depends_on.clone(),
                counter: None,
            });
        }
        let mut roots: Vec<&String> = names.iter().filter(|n| !called.contains(*n)).collect();
        roots.sort_by_key(|name| {
            let has_port = model
                .service(name)
                .map(|d| !d.ports.is_empty())
                .unwrap_or(false);
            (if has_port { 0 } else { 1 }, name.to_string())
        });
        let entry = roots
            .first()
            .map(|s| s.to_string())
            .ok_or_else(|| SimError::Topology("no entry service (dependency cycle?)".into()))?;
        let topology = SimTopology {
            services,
            entry,
            seed: 0,
        };
        topology.validate()?;
        Ok(topology)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.services.is_empty() {
            return Err(SimError::Topology("no services".into()));
        }
        let mut index = BTreeMap::new();
        for (i, s) in self.services.iter().enumerate() {
            if index.insert(s.name.clone(), i).is_some() {
                return Err(SimError::Topology(format!(
                    "duplicate service {:?}",
                    s.name
                )));
            }
            if !(0.0..=1.0).contains(&s.error_rate) {
                return Err(SimError::Topology(format!(
                    "service {:?}: error_rate must be in [0, 1]",
                    s.name
                )));
            }
            if s.base_latency_ms < 0.0 {
                return Err(SimError::Topology(format!(
                    "service {:?}: base_latency_ms must be non-negative",
                    s.name
                )));
            }
        }
        if !index.contains_key(&self.entry) {
            return Err(SimError::Topology(format!(
                "entry {:?} is not a service",
                self.entry
            )));
        }
        for s in &self.services {
            for d in &s.downstream {
                if !index.contains_key(d) {
                    return Err(SimError::Topology(format!(
                        "service {:?} calls unknown service {d:?}",
                        s.name
                    )));
                }
            }
        }
        // cycle check: depth-first with colors
        #[derive(Clone, Copy, PartialEq)]
        enum Color {
            White,
            Grey,
            Black,
        }
        fn dfs(
            node: usize,
            services: &[SimServiceDef],
            index: &BTreeMap<String, usize>,
            colors: &mut [Color],
        ) -> Result<(), SimError> {
            colors[node] = Color::Grey;
            for dep in &services[node].downstream {
                let next = index[dep];
                match colors[next] {
                    Color::Grey => {
                        return Err(SimError::Topology(format!(
                            "call graph cycle through {:?}",
                            services[next].name
                        )))
                    }
                    Color::White => dfs(next, services, index, colors)?,
                    Color::Black => {}
                }
            }
            colors[node] = Color::Black;
            Ok(())
        }
        let mut colors = vec![Color::White; self.services.len()];
        for i in 0..self.services.len() {
            if colors[i] == Color::White {
                dfs(i, &self.services, &index, &mut colors)?;
            }
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.services.iter().position(|s| s.name == name)
    }
}
