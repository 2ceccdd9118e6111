//! Container backend: talks to the container daemon's HTTP API directly
//! (Unix socket by default, `DOCKER_HOST` with `tcp://` or `unix://`
//! schemes respected).
//!
//! Supported surface is the minimal set the engine needs: create, start,
//! pause, unpause, kill, stop, remove, exec and ping. Images must already
//! be present on the host; there is no pull support.

use std::collections::BTreeMap;
use std::net::TcpStream;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::json;

use crate::minihttp::{request, Endpoint, HttpError, Response};
use crate::time::Clock;

use super::journal::{Journal, JournalEvent};
use super::runtime::{BackendKind, ExecOutput, RuntimeApi, RuntimeError, ServiceState};
use super::{OrchestratorError, Runtime, SueModel, TeardownSummary};

const API_TIMEOUT: Duration = Duration::from_secs(30);
/// Services without ports or health checks count as ready this long after start.
const GRACE_PERIOD_MS: u64 = 5_000;

/// Connection details for the container daemon.
#[derive(Debug, Clone)]
pub struct DockerHost {
    endpoint: Endpoint,
}

impl DockerHost {
    /// Resolve from `DOCKER_HOST`, falling back to the default socket.
    pub fn from_env() -> DockerHost {
        match std::env::var("DOCKER_HOST") {
            Ok(value) => DockerHost::from_spec(&value),
            Err(_) => DockerHost {
                endpoint: Endpoint::Unix {
                    path: "/var/run/docker.sock".into(),
                },
            },
        }
    }

    pub fn from_spec(spec: &str) -> DockerHost {
        if let Some(rest) = spec.strip_prefix("unix://") {
            return DockerHost {
                endpoint: Endpoint::Unix {
                    path: rest.to_string(),
                },
            };
        }
        if let Some(rest) = spec
            .strip_prefix("tcp://")
            .or_else(|| spec.strip_prefix("http://"))
        {
            let (host, port) = match rest.rsplit_once(':') {
                Some((h, p)) => (h.to_string(), p.parse().unwrap_or(2375)),
                None => (rest.to_string(), 2375),
            };
            return DockerHost {
                endpoint: Endpoint::Tcp { host, port },
            };
        }
        DockerHost {
            endpoint: Endpoint::Unix {
                path: spec.to_string(),
            },
        }
    }

    fn call(
        &self,
        method: &str,
        path: &str,
        body: Option<&serde_json::Value>,
    ) -> Result<Response, HttpError> {
        let payload = body.map(|b| serde_json::to_vec(b).expect("json serializes"));
        request(
            &self.endpoint,
            method,
            path,
            &[("Content-Type", "application/json")],
            payload.as_deref(),
            API_TIMEOUT,
        )
    }

    /// Daemon liveness; the canonical backend-availability check.
    pub fn ping(&self) -> Result<(), OrchestratorError> {
        match self.call("GET", "/_ping", None) {
            Ok(resp) if resp.status == 200 => Ok(()),
            Ok(resp) => Err(OrchestratorError::BackendUnavailable(format!(
                "daemon ping returned {}",
                resp.status
            ))),
            Err(e) => Err(OrchestratorError::BackendUnavailable(e.to_string())),
        }
    }
}

struct ContainerEntry {
    id: String,
    state: ServiceState,
    started_at_ms: u64,
}

struct Inner {
    services: BTreeMap<String, ContainerEntry>,
    network_id: Option<String>,
    torn_down: bool,
}

/// A started (or starting) compose model on the container daemon.
pub struct ContainerRuntime {
    host: DockerHost,
    model: SueModel,
    run_id: String,
    journal: Arc<Journal>,
    clock: Arc<dyn Clock>,
    inner: Mutex<Inner>,
}

impl ContainerRuntime {
    pub fn new(
        host: DockerHost,
        model: SueModel,
        run_id: &str,
        journal: Arc<Journal>,
        clock: Arc<dyn Clock>,
    ) -> ContainerRuntime {
        ContainerRuntime {
            host,
            model,
            run_id: run_id.to_string(),
            journal,
            clock,
            inner: Mutex::new(Inner {
                services: BTreeMap::new(),
                network_id: None,
                torn_down: false,
            }),
        }
    }

    fn api(
        &self,
        method: &str,
        path: &str,
        body: Option<&serde_json::Value>,
    ) -> Result<Response, RuntimeError> {
        self.host
            .call(method, path, body)
            .map_err(|e| RuntimeError::Backend(e.to_string()))
    }

    fn api_ok(
        &self,
        method: &str,
        path: &str,
        body: Option<&serde_json::Value>,
    ) -> Result<Response, RuntimeError> {
        let resp = self.api(method, path, body)?;
        if resp.status >= 300 {
            return Err(RuntimeError::Backend(format!(
                "{method} {path} -> {}: {}",
                resp.status,
                resp.body_str().trim()
            )));
        }
        Ok(resp)
    }

    fn container_id(&self, service: &str) -> Result<String, RuntimeError> {
        let inner = self.inner.lock().unwrap();
        inner
            .services
            .get(service)
            .map(|e| e.id.clone())
            .ok_or_else(|| RuntimeError::UnknownService(service.to_string()))
    }

    fn set_state(&self, service: &str, state: ServiceState) {
        if let Some(entry) = self.inner.lock().unwrap().services.get_mut(service) {
            entry.state = state;
        }
    }

    fn create_network(&self) -> Result<String, RuntimeError> {
        let name = format!("oxn-{}", self.run_id);
        let resp = self.api_ok(
            "POST",
            "/networks/create",
            Some(&json!({ "Name": name, "Labels": { "oxn.run": self.run_id } })),
        )?;
        let parsed: serde_json::Value = serde_json::from_slice(&resp.body)
            .map_err(|e| RuntimeError::Backend(format!("bad network response: {e}")))?;
        Ok(parsed["Id"].as_str().unwrap_or(&name).to_string())
    }

    fn create_and_start(&self, service: &str, network: &str) -> Result<String, RuntimeError> {
        let def = self
            .model
            .service(service)
            .ok_or_else(|| RuntimeError::UnknownService(service.to_string()))?;
        let image = def
            .image
            .clone()
            .ok_or_else(|| RuntimeError::Backend(format!("service {service:?} has no image")))?;
        let env: Vec<String> = def
            .environment
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();

        let mut exposed = serde_json::Map::new();
        let mut bindings = serde_json::Map::new();
        for port in &def.ports {
            let key = format!("{}/tcp", port.container);
            exposed.insert(key.clone(), json!({}));
            if let Some(host_port) = port.host {
                bindings.insert(key, json!([{ "HostPort": host_port.to_string() }]));
            }
        }

        let mut body = json!({
            "Image": image,
            "Env": env,
            "Labels": { "oxn.run": self.run_id, "oxn.service": service },
            "ExposedPorts": exposed,
            "HostConfig": {
                "PortBindings": bindings,
                "NetworkMode": network,
                "CapAdd": ["NET_ADMIN"],
            },
            "NetworkingConfig": { "EndpointsConfig": { network: { "Aliases": [service] } } },
        });
        if let Some(cmd) = &def.command {
            body["Cmd"] = crate::treatments::yaml_to_json(cmd.clone());
        }

        let name = format!("oxn-{}-{}", self.run_id, service);
        let resp = self.api_ok(
            "POST",
            &format!("/containers/create?name={name}"),
            Some(&body),
        )?;
        let parsed: serde_json::Value = serde_json::from_slice(&resp.body)
            .map_err(|e| RuntimeError::Backend(format!("bad create response: {e}")))?;
        let id = parsed["Id"]
            .as_str()
            .ok_or_else(|| RuntimeError::Backend("create response missing Id".into()))?
            .to_string();
        self.api_ok("POST", &format!("/containers/{id}/start"), None)?;
        Ok(id)
    }

    /// TCP-probe readiness: first published port accepting connections, or
    /// the grace period for services without ports.
    fn probe_ready(&self, service: &str) -> bool {
        let def = match self.model.service(service) {
            Some(d) => d,
            None => return false,
        };
        let started_at = self
            .inner
            .lock()
            .unwrap()
            .services
            .get(service)
            .map(|e| e.started_at_ms)
            .unwrap_or(0);
        let host_port = def.ports.iter().find_map(|p| p.host);
        match host_port {
            Some(port) => TcpStream::connect_timeout(
                &format!("127.0.0.1:{port}").parse().unwrap(),
                Duration::from_millis(500),
            )
            .is_ok(),
            None => self.clock.now_ms().saturating_sub(started_at) >= GRACE_PERIOD_MS,
        }
    }
}

impl RuntimeApi for ContainerRuntime {
    fn backend_kind(&self) -> BackendKind {
        BackendKind::Container
    }

    fn services(&self) -> Vec<String> {
        self.model.service_names()
    }

    fn state_of(&self, service: &str) -> Option<ServiceState> {
        self.inner
            .lock()
            .unwrap()
            .services
            .get(service)
            .map(|e| e.state)
    }

    fn pause(&self, service: &str) -> Result<(), RuntimeError> {
        let id = self.container_id(service)?;
        self.api_ok("POST", &format!("/containers/{id}/pause"), None)?;
        self.set_state(service, ServiceState::Paused);
        self.journal.append(
            self.clock.now_ms(),
            JournalEvent::ServicePaused {
                service: service.into(),
            },
        );
        Ok(())
    }

    fn unpause(&self, service: &str) -> Result<(), RuntimeError> {
        let id = self.container_id(service)?;
        self.api_ok("POST", &format!("/containers/{id}/unpause"), None)?;
        self.set_state(service, ServiceState::Ready);
        self.journal.append(
            self.clock.now_ms(),
            JournalEvent::ServiceUnpaused {
                service: service.into(),
            },
        );
        Ok(())
    }

    fn kill(&self, service: &str) -> Result<(), RuntimeError> {
        let id = self.container_id(service)?;
        self.api_ok("POST", &format!("/containers/{id}/kill"), None)?;
        self.set_state(service, ServiceState::Killed);
        self.journal.append(
            self.clock.now_ms(),
            JournalEvent::ServiceKilled {
                service: service.into(),
            },
        );
        Ok(())
    }

    fn exec(&self, service: &str, command: &[String]) -> Result<ExecOutput, RuntimeError> {
        let id = self.container_id(service)?;
        let create = self.api_ok(
            "POST",
            &format!("/containers/{id}/exec"),
            Some(&json!({ "Cmd": command, "AttachStdout": true, "AttachStderr": true })),
        )?;
        let parsed: serde_json::Value = serde_json::from_slice(&create.body)
            .map_err(|e| RuntimeError::Backend(format!("bad exec response: {e}")))?;
        let exec_id = parsed["Id"]
            .as_str()
            .ok_or_else(|| RuntimeError::Backend("exec response missing Id".into()))?
            .to_string();

        let start = self.api_ok(
            "POST",
            &format!("/exec/{exec_id}/start"),
            Some(&json!({ "Detach": false, "Tty": false })),
        )?;
        let output = demux_exec_stream(&start.body);

        let inspect = self.api_ok("GET", &format!("/exec/{exec_id}/json"), None)?;
        let meta: serde_json::Value = serde_json::from_slice(&inspect.body)
            .map_err(|e| RuntimeError::Backend(format!("bad exec inspect: {e}")))?;
        let exit_code = meta["ExitCode"].as_i64().unwrap_or(-1);

        self.journal.append(
            self.clock.now_ms(),
            JournalEvent::Exec {
                service: service.into(),
                command: command.to_vec(),
                exit_code,
            },
        );
        Ok(ExecOutput { exit_code, output })
    }

    fn patch_env(&self, _service: &str, _key: &str, _value: &str) -> Result<(), RuntimeError> {
        Err(RuntimeError::NotPrestart {
            operation: "patch_env",
        })
    }

    fn patch_config_file(
        &self,
        _service: &str,
        _path: &str,
        _contents: &str,
    ) -> Result<(), RuntimeError> {
        Err(RuntimeError::NotPrestart {
            operation: "patch_config_file",
        })
    }
}

/// Exec output arrives as 8-byte-framed stdout/stderr records.
fn demux_exec_stream(raw: &[u8]) -> String {
    let mut out = Vec::new();
    let mut i = 0;
    while i + 8 <= raw.len() {
        let size = u32::from_be_bytes([raw[i + 4], raw[i + 5], raw[i + 6], raw[i + 7]]) as usize;
        let start = i + 8;
        let end = (start + size).min(raw.len());
        out.extend_from_slice(&raw[start..end]);
        i = end;
    }
    if out.is_empty() && !raw.is_empty() {
        // tty mode or a daemon that answered unframed
        return String::from_utf8_lossy(raw).into_owned();
    }
    String::from_utf8_lossy(&out).into_owned()
}

impl Runtime for ContainerRuntime {
    fn start(&self, readiness_timeout_ms: u64) -> Result<(), OrchestratorError> {
        self.host.ping()?;
        self.journal.append(
            self.clock.now_ms(),
            JournalEvent::SueStarting {
                backend: "container".into(),
            },
        );

        let network = self.create_network()?;
        self.inner.lock().unwrap().network_id = Some(network.clone());

        // start in dependency order: repeatedly start services whose deps run
        let mut remaining: Vec<String> = self.model.service_names();
        let mut started: Vec<String> = Vec::new();
        while !remaining.is_empty() {
            let ready_now: Vec<String> = remaining
                .iter()
                .filter(|name| {
                    self.model
                        .service(name)
                        .map(|d| d.depends_on.iter().all(|dep| started.contains(dep)))
                        .unwrap_or(true)
                })
                .cloned()
                .collect();
            if ready_now.is_empty() {
                return Err(OrchestratorError::BackendUnavailable(format!(
                    "dependency cycle among services: {remaining:?}"
                )));
            }
            for name in ready_now {
                let id = self.create_and_start(&name, &network)?;
                self.inner.lock().unwrap().services.insert(
                    name.clone(),
                    ContainerEntry {
                        id,
                        state: ServiceState::Starting,
                        started_at_ms: self.clock.now_ms(),
                    },
                );
                remaining.retain(|n| n != &name);
                started.push(name);
            }
        }

        // concurrent readiness probes until the timeout
        let deadline = self.clock.now_ms() + readiness_timeout_ms;
        let mut unready: Vec<String> = self.model.service_names();
        while !unready.is_empty() && self.clock.now_ms() < deadline {
            let mut still = Vec::new();
            for name in unready {
                if self.probe_ready(&name) {
                    self.set_state(&name, ServiceState::Ready);
                    self.journal.append(
                        self.clock.now_ms(),
                        JournalEvent::ServiceReady {
                            service: name.clone(),
                        },
                    );
                } else {
                    still.push(name);
                }
            }
            unready = still;
            if !unready.is_empty() {
                std::thread::sleep(Duration::from_millis(500));
            }
        }
        if !unready.is_empty() {
            return Err(OrchestratorError::ReadinessTimeout {
                timeout_ms: readiness_timeout_ms,
                unready,
            });
        }
        self.journal
            .append(self.clock.now_ms(), JournalEvent::SueReady);
        Ok(())
    }

    fn teardown(&self) -> TeardownSummary {
        {
            let inner = self.inner.lock().unwrap();
            if inner.torn_down {
                return TeardownSummary {
                    already_torn_down: true,
                    stopped: Vec::new(),
                    pre_terminated: Vec::new(),
                };
            }
        }
        self.journal
            .append(self.clock.now_ms(), JournalEvent::TeardownStarted);
        let mut stopped = Vec::new();
        let mut pre_terminated = Vec::new();
        let entries: Vec<(String, String, ServiceState)> = {
            let inner = self.inner.lock().unwrap();
            inner
                .services
                .iter()
                .map(|(n, e)| (n.clone(), e.id.clone(), e.state))
                .collect()
        };
        for (name, id, state) in entries {
            let was_terminal = matches!(state, ServiceState::Killed | ServiceState::Stopped);
            if !was_terminal {
                let _ = self.api("POST", &format!("/containers/{id}/stop?t=2"), None);
            }
            let _ = self.api("DELETE", &format!("/containers/{id}?force=true"), None);
            self.journal.append(
                self.clock.now_ms(),
                JournalEvent::ServiceStopped {
                    service: name.clone(),
                    pre_terminated: was_terminal,
                },
            );
            self.set_state(&name, ServiceState::Stopped);
            if was_terminal {
                pre_terminated.push(name);
            } else {
                stopped.push(name);
            }
        }
        if let Some(network) = self.inner.lock().unwrap().network_id.clone() {
            let _ = self.api("DELETE", &format!("/networks/{network}"), None);
        }
        self.journal
            .append(self.clock.now_ms(), JournalEvent::TornDown);
        self.journal.flush();
        self.inner.lock().unwrap().torn_down = true;
        TeardownSummary {
            already_torn_down: false,
            stopped,
            pre_terminated,
        }
    }
}
