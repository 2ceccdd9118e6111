//! Bringing the system under experiment up and down.
//!
//! `build_sue` turns the user's compose file plus instrumentation
//! treatments into an effective service model without ever touching the
//! original file. Backends implement [`Runtime`] on top of the shared
//! [`RuntimeApi`] capability interface.

pub mod docker;
pub mod journal;
pub mod runtime;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use thiserror::Error;

use crate::compose::{parse_compose, render_compose, ComposeFile, ComposeParseError, ServiceDef};
use crate::config::{Phase, SueSpec, TreatmentSpec};
use crate::treatments::build_treatment;

use journal::{Journal, JournalEvent};
use runtime::{BackendKind, ExecOutput, RuntimeApi, RuntimeError, ServiceState};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("cannot read compose file {path}: {message}")]
    ComposeRead { path: PathBuf, message: String },
    #[error(transparent)]
    ComposeParse(#[from] ComposeParseError),
    #[error("unknown service {name:?} ({context})")]
    UnknownService { name: String, context: String },
    #[error("treatment {0:?} is not an instrumentation treatment")]
    NotInstrumentation(String),
    #[error("services not ready after {timeout_ms}ms: {unready:?}")]
    ReadinessTimeout {
        timeout_ms: u64,
        unready: Vec<String>,
    },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("treatment failed during setup: {0}")]
    Treatment(String),
}

/// The filtered, patched service model a run deploys.
#[derive(Debug, Clone, PartialEq)]
pub struct SueModel {
    compose: ComposeFile,
    /// Extra config files per service, path -> contents, staged for mounting.
    config_files: BTreeMap<String, BTreeMap<String, String>>,
}

impl SueModel {
    pub fn service_names(&self) -> Vec<String> {
        self.compose.services.keys().cloned().collect()
    }

    pub fn service(&self, name: &str) -> Option<&ServiceDef> {
        self.compose.services.get(name)
    }

    pub fn has_service(&self, name: &str) -> bool {
        self.compose.services.contains_key(name)
    }

    pub fn env_of(&self, service: &str) -> Option<&BTreeMap<String, String>> {
        self.compose.services.get(service).map(|s| &s.environment)
    }

    pub fn config_files_of(&self, service: &str) -> Option<&BTreeMap<String, String>> {
        self.config_files.get(service)
    }

    /// Deterministic, byte-stable rendering of the effective model.
    pub fn render_effective_compose(&self) -> String {
        render_compose(&self.compose)
    }
}

/// Build the effective service model: parse the compose file, apply
/// include/exclude filtering, verify the dependency closure, then apply
/// all instrumentation treatments. The input file is never modified.
pub fn build_sue(
    sue: &SueSpec,
    base_dir: &Path,
    instrumentation: &[TreatmentSpec],
    journal: &Journal,
    now_ms: u64,
) -> Result<SueModel, OrchestratorError> {
    let path = base_dir.join(&sue.compose_path);
    let text = std::fs::read_to_string(&path).map_err(|e| OrchestratorError::ComposeRead {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let compose = parse_compose(&text)?;
    build_sue_from_compose(compose, sue, instrumentation, journal, now_ms)
}

/// Same as [`build_sue`] but starting from an already parsed compose model.
pub fn build_sue_from_compose(
    mut compose: ComposeFile,
    sue: &SueSpec,
    instrumentation: &[TreatmentSpec],
    journal: &Journal,
    now_ms: u64,
) -> Result<SueModel, OrchestratorError> {
    for name in &sue.exclude {
        if !compose.services.contains_key(name) {
            return Err(OrchestratorError::UnknownService {
                name: name.clone(),
                context: "named in sue.exclude".into(),
            });
        }
    }
    if let Some(include) = &sue.include {
        for name in include {
            if !compose.services.contains_key(name) {
                return Err(OrchestratorError::UnknownService {
                    name: name.clone(),
                    context: "named in sue.include".into(),
                });
            }
        }
        compose.services.retain(|name, _| include.contains(name));
    }
    compose
        .services
        .retain(|name, _| !sue.exclude.contains(name));

    // dependency closure: a surviving service must not depend on a removed one
    for (name, def) in &compose.services {
        for dep in &def.depends_on {
            if !compose.services.contains_key(dep) {
                return Err(OrchestratorError::UnknownService {
                    name: dep.clone(),
                    context: format!("service {name:?} depends on it but it was filtered out"),
                });
            }
        }
    }

    let model = SueModel {
        compose,
        config_files: BTreeMap::new(),
    };
    journal.append(
        now_ms,
        JournalEvent::SueBuilt {
            services: model.service_names(),
        },
    );

    let patcher = ModelPatcher {
        model: Mutex::new(model),
        journal,
        now_ms,
    };
    for spec in instrumentation {
        if spec.phase() != Phase::Instrumentation {
            return Err(OrchestratorError::NotInstrumentation(spec.name.clone()));
        }
        if !patcher
            .model
            .lock()
            .unwrap()
            .has_service(spec.target_service())
        {
            return Err(OrchestratorError::UnknownService {
                name: spec.target_service().to_string(),
                context: format!("targeted by treatment {:?}", spec.name),
            });
        }
        let treatment = build_treatment(spec);
        treatment
            .apply(&patcher)
            .map_err(|e| OrchestratorError::Treatment(format!("{}: {e}", spec.name)))?;
    }
    Ok(patcher.model.into_inner().unwrap())
}

/// Write the effective compose file next to the run artifacts.
pub fn write_effective_compose(model: &SueModel, run_dir: &Path) -> std::io::Result<PathBuf> {
    let path = run_dir.join("effective-compose.yml");
    std::fs::write(&path, model.render_effective_compose())?;
    if let Some(parent) = path.parent() {
        for (service, files) in &model.config_files {
            for (rel, contents) in files {
                let safe = rel.replace(['/', '\\'], "_");
                let file_path = parent.join("config").join(service).join(safe);
                std::fs::create_dir_all(file_path.parent().unwrap())?;
                std::fs::write(&file_path, contents)?;
            }
        }
    }
    Ok(path)
}

/// Pre-start patcher: exposes the model through [`RuntimeApi`] so
/// instrumentation treatments use the same interface as fault treatments.
struct ModelPatcher<'a> {
    model: Mutex<SueModel>,
    journal: &'a Journal,
    now_ms: u64,
}

impl RuntimeApi for ModelPatcher<'_> {
    fn backend_kind(&self) -> BackendKind {
        BackendKind::Simulated
    }

    fn services(&self) -> Vec<String> {
        self.model.lock().unwrap().service_names()
    }

    fn state_of(&self, service: &str) -> Option<ServiceState> {
        self.model
            .lock()
            .unwrap()
            .has_service(service)
            .then_some(ServiceState::Starting)
    }

    fn pause(&self, _service: &str) -> Result<(), RuntimeError> {
        Err(RuntimeError::NotStarted)
    }

    fn unpause(&self, _service: &str) -> Result<(), RuntimeError> {
        Err(RuntimeError::NotStarted)
    }

    fn kill(&self, _service: &str) -> Result<(), RuntimeError> {
        Err(RuntimeError::NotStarted)
    }

    fn exec(&self, _service: &str, _command: &[String]) -> Result<ExecOutput, RuntimeError> {
        Err(RuntimeError::NotStarted)
    }

    fn patch_env(&self, service: &str, key: &str, value: &str) -> Result<(), RuntimeError> {
        let mut model = self.model.lock().unwrap();
        let def = model
            .compose
            .services
            .get_mut(service)
            .ok_or_else(|| RuntimeError::UnknownService(service.to_string()))?;
        def.environment.insert(key.to_string(), value.to_string());
        self.journal.append(
            self.now_ms,
            JournalEvent::EnvPatched {
                service: service.to_string(),
                key: key.to_string(),
                value: value.to_string(),
            },
        );
        Ok(())
    }

    fn patch_config_file(
        &self,
        service: &str,
        path: &str,
        contents: &str,
    ) -> Result<(), RuntimeError> {
        let mut model = self.model.lock().unwrap();
        if !model.has_service(service) {
            return Err(RuntimeError::UnknownService(service.to_string()));
        }
        model
            .config_files
            .entry(service.to_string())
            .or_default()
            .insert(path.to_string(), contents.to_string());
        self.journal.append(
            self.now_ms,
            JournalEvent::ConfigPatched {
                service: service.to_string(),
                path: path.to_string(),
            },
        );
        Ok(())
    }
}

/// A started backend: the capability interface plus lifecycle control.
pub trait Runtime: RuntimeApi {
    /// Bring all services to ready, probing health within the timeout.
    fn start(&self, readiness_timeout_ms: u64) -> Result<(), OrchestratorError>;
    /// Stop and remove everything. Idempotent; errors are logged, not raised.
    fn teardown(&self) -> TeardownSummary;
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TeardownSummary {
    pub already_torn_down: bool,
    pub stopped: Vec<String>,
    /// Services that were already terminal (e.g. killed by a treatment).
    pub pre_terminated: Vec<String>,
}
