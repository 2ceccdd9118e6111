//! The simulated backend's runtime handle: same capability interface as
//! the container backend, including interpretation of the tc/stress-ng
//! command strings treatments exec inside their targets.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use crate::orchestrator::journal::{Journal, JournalEvent};
use crate::orchestrator::runtime::{
    BackendKind, ExecOutput, RuntimeApi, RuntimeError, ServiceState,
};
use crate::orchestrator::{OrchestratorError, Runtime, TeardownSummary};
use crate::time::Clock;

use super::state::SimSue;

pub struct SimRuntime {
    sue: Arc<SimSue>,
    journal: Arc<Journal>,
    clock: Arc<dyn Clock>,
    states: Mutex<BTreeMap<String, ServiceState>>,
    torn_down: Mutex<bool>,
}

impl SimRuntime {
    pub fn new(sue: Arc<SimSue>, journal: Arc<Journal>, clock: Arc<dyn Clock>) -> SimRuntime {
        let states = sue
            .service_names()
            .into_iter()
            .map(|name| (name, ServiceState::Starting))
            .collect();
        SimRuntime {
            sue,
            journal,
            clock,
            states: Mutex::new(states),
            torn_down: Mutex::new(false),
        }
    }

    pub fn sue(&self) -> Arc<SimSue> {
        self.sue.clone()
    }

    fn require_service(&self, service: &str) -> Result<(), RuntimeError> {
        if self.sue.topology().index_of(service).is_some() {
            Ok(())
        } else {
            Err(RuntimeError::UnknownService(service.to_string()))
        }
    }

    fn interpret_exec(&self, service: &str, command: &[String]) -> ExecOutput {
        let args: Vec<&str> = command.iter().map(String::as_str).collect();
        match args.as_slice() {
            ["tc", "-V"] => ExecOutput {
                exit_code: 0,
                output: "tc utility (sim)".into(),
            },
            ["tc", "qdisc", "add", "dev", _iface, "root", "netem", rest @ ..] => {
                match parse_netem(rest) {
                    Ok(netem) => {
                        let installed = self
                            .sue
                            .with_service_state(service, |s| {
                                s.install_qdisc(
                                    netem.delay_us,
                                    netem.jitter_us,
                                    netem.loss_p,
                                    netem.corrupt_p,
                                )
                            })
                            .unwrap_or(false);
                        if installed {
                            ExecOutput {
                                exit_code: 0,
                                output: String::new(),
                            }
                        } else {
                            ExecOutput {
                                exit_code: 2,
                                output: "Error: Exclusivity flag on, cannot modify.".into(),
                            }
                        }
                    }
                    Err(msg) => ExecOutput {
                        exit_code: 1,
                        output: msg,
                    },
                }
            }
            ["tc", "qdisc", "del", "dev", _iface, "root"] => {
                let removed = self
                    .sue
                    .with_service_state(service, |s| s.remove_qdisc())
                    .unwrap_or(false);
                if removed {
                    ExecOutput {
                        exit_code: 0,
                        output: String::new(),
                    }
                } else {
                    ExecOutput {
                        exit_code: 2,
                        output: "Error: Cannot delete qdisc with handle of zero.".into(),
                    }
                }
            }
            ["stress-ng", "--version"] => ExecOutput {
                exit_code: 0,
                output: "stress-ng, version (sim)".into(),
            },
            ["stress-ng", rest @ ..] => match parse_stress(rest) {
                Ok(stress) => {
                    let now_us = self.clock.now_ms() * 1000;
                    let until_us = now_us + stress.timeout_s * 1_000_000;
                    self.sue
                        .with_service_state(service, |s| s.set_stress(stress.factor, until_us));
                    ExecOutput {
                        exit_code: 0,
                        output: String::new(),
                    }
                }
                Err(msg) => ExecOutput {
                    exit_code: 1,
                    output: msg,
                },
            },
            ["pkill", "stress-ng"] => {
                let had = self
                    .sue
                    .with_service_state(service, |s| s.clear_stress())
                    .unwrap_or(false);
                ExecOutput {
                    exit_code: if had { 0 } else { 1 },
                    output: String::new(),
                }
            }
            _ => ExecOutput {
                exit_code: 127,
                output: format!("sim: unsupported command {:?}", command.join(" ")),
            },
        }
    }
}

struct NetemArgs {
    delay_us: u64,
    jitter_us: u64,
    loss_p: f64,
    corrupt_p: f64,
}

fn parse_time_us(s: &str) -> Result<u64, String> {
    if let Some(ms) = s.strip_suffix("ms") {
        return ms
            .parse::<f64>()
            .map(|v| (v * 1000.0) as u64)
            .map_err(|_| format!("bad time {s:?}"));
    }
    if let Some(us) = s.strip_suffix("us") {
        return us.parse::<u64>().map_err(|_| format!("bad time {s:?}"));
    }
    if let Some(sec) = s.strip_suffix('s') {
        return sec
            .parse::<f64>()
            .map(|v| (v * 1_000_000.0) as u64)
            .map_err(|_| format!("bad time {s:?}"));
    }
    Err(format!("bad time {s:?}"))
}

fn parse_percent(s: &str) -> Result<f64, String> {
    s.strip_suffix('%')
        .ok_or_else(|| format!("expected percentage, got {s:?}"))?
        .parse::<f64>()
        .map(|p| p / 100.0)
        .map_err(|_| format!("bad percentage {s:?}"))
}

fn parse_netem(args: &[&str]) -> Result<NetemArgs, String> {
    let mut netem = NetemArgs {
        delay_us: 0,
        jitter_us: 0,
        loss_p: 0.0,
        corrupt_p: 0.0,
    };
    let mut i = 0;
    while i < args.len() {
        match args[i] {
            "delay" => {
                netem.delay_us = parse_time_us(args.get(i + 1).ok_or("delay needs a value")?)?;
                i += 2;
                if let Some(jitter) = args.get(i).and_then(|a| parse_time_us(a).ok()) {
                    netem.jitter_us = jitter;
                    i += 1;
                }
            }
            "loss" => {
                netem.loss_p = parse_percent(args.get(i + 1).ok_or("loss needs a value")?)?;
                i += 2;
            }
            "corrupt" => {
                netem.corrupt_p = parse_percent(args.get(i + 1).ok_or("corrupt needs a value")?)?;
                i += 2;
            }
            other => return Err(format!("unsupported netem option {other:?}")),
        }
    }
    Ok(netem)
}

struct StressArgs {
    factor: f64,
    timeout_s: u64,
}

/// CPU pressure scales service latency: factor 1 + workers * load/100.
fn parse_stress(args: &[&str]) -> Result<StressArgs, String> {
    let mut workers = 1u64;
    let mut load = 100.0f64;
    let mut timeout_s = u64::MAX / 1_000_000 - 1;
    let mut i = 0;
    while i < args.len() {
        match args[i] {
            "--cpu" | "--io" | "--vm" => {
                workers = args
                    .get(i + 1)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| format!("{} needs a worker count", args[i]))?;
                i += 2;
            }
            "--cpu-load" => {
                load = args
                    .get(i + 1)
                    .and_then(|v| v.parse().ok())
                    .ok_or("--cpu-load needs a value")?;
                i += 2;
            }
            "--timeout" => {
                let t = args.get(i + 1).ok_or("--timeout needs a value")?;
                timeout_s = t
                    .strip_suffix('s')
                    .unwrap_or(t)
                    .parse()
                    .map_err(|_| format!("bad timeout {t:?}"))?;
                i += 2;
            }
            other => return Err(format!("unsupported stress-ng option {other:?}")),
        }
    }
    Ok(StressArgs {
        factor: 1.0 + workers as f64 * load / 100.0,
        timeout_s,
    })
}

impl RuntimeApi for SimRuntime {
    fn backend_kind(&self) -> BackendKind {
        BackendKind::Simulated
    }

    fn services(&self) -> Vec<String> {
        self.sue.service_names()
    }

    fn state_of(&self, service: &str) -> Option<ServiceState> {
        self.states.lock().unwrap().get(service).copied()
    }

    fn pause(&self, service: &str) -> Result<(), RuntimeError> {
        self.require_service(service)?;
        match self.state_of(service) {
            Some(ServiceState::Ready) => {}
            Some(state) => {
                return Err(RuntimeError::InvalidState {
                    service: service.into(),
                    state,
                    operation: "pause",
                })
            }
            None => return Err(RuntimeError::UnknownService(service.into())),
        }
        self.sue.with_service_state(service, |s| s.set_paused(true));
        self.states
            .lock()
            .unwrap()
            .insert(service.into(), ServiceState::Paused);
        self.journal.append(
            self.clock.now_ms(),
            JournalEvent::ServicePaused {
                service: service.into(),
            },
        );
        Ok(())
    }

    fn unpause(&self, service: &str) -> Result<(), RuntimeError> {
        self.require_service(service)?;
        match self.state_of(service) {
            Some(ServiceState::Paused) => {}
            Some(state) => {
                return Err(RuntimeError::InvalidState {
                    service: service.into(),
                    state,
                    operation: "unpause",
                })
            }
            None => return Err(RuntimeError::UnknownService(service.into())),
        }
        self.sue
            .with_service_state(service, |s| s.set_paused(false));
        self.states
            .lock()
            .unwrap()
            .insert(service.into(), ServiceState::Ready);
        self.journal.append(
            self.clock.now_ms(),
            JournalEvent::ServiceUnpaused {
                service: service.into(),
            },
        );
        Ok(())
    }

    fn kill(&self, service: &str) -> Result<(), RuntimeError> {
        self.require_service(service)?;
        if matches!(
            self.state_of(service),
            Some(ServiceState::Killed | ServiceState::Stopped)
        ) {
            return Err(RuntimeError::InvalidState {
                service: service.into(),
                state: self.state_of(service).unwrap(),
                operation: "kill",
            });
        }
        self.sue.with_service_state(service, |s| s.set_killed());
        self.states
            .lock()
            .unwrap()
            .insert(service.into(), ServiceState::Killed);
        self.journal.append(
            self.clock.now_ms(),
            JournalEvent::ServiceKilled {
                service: service.into(),
            },
        );
        Ok(())
    }

    fn exec(&self, service: &str, command: &[String]) -> Result<ExecOutput, RuntimeError> {
        self.require_service(service)?;
        match self.state_of(service) {
            Some(ServiceState::Killed | ServiceState::Stopped) => {
                return Err(RuntimeError::InvalidState {
                    service: service.into(),
                    state: self.state_of(service).unwrap(),
                    operation: "exec",
                })
            }
            None => return Err(RuntimeError::UnknownService(service.into())),
            _ => {}
        }
        let output = self.interpret_exec(service, command);
        self.journal.append(
            self.clock.now_ms(),
            JournalEvent::Exec {
                service: service.into(),
                command: command.to_vec(),
                exit_code: output.exit_code,
            },
        );
        Ok(output)
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

impl Runtime for SimRuntime {
    fn start(&self, _readiness_timeout_ms: u64) -> Result<(), OrchestratorError> {
        self.journal.append(
            self.clock.now_ms(),
            JournalEvent::SueStarting {
                backend: "sim".into(),
            },
        );
        let names = self.sue.service_names();
        let mut states = self.states.lock().unwrap();
        for name in names {
            states.insert(name.clone(), ServiceState::Ready);
            self.journal.append(
                self.clock.now_ms(),
                JournalEvent::ServiceReady { service: name },
            );
        }
        drop(states);
        self.journal
            .append(self.clock.now_ms(), JournalEvent::SueReady);
        Ok(())
    }

    fn teardown(&self) -> TeardownSummary {
        let mut torn_down = self.torn_down.lock().unwrap();
        if *torn_down {
            return TeardownSummary {
                already_torn_down: true,
                stopped: Vec::new(),
                pre_terminated: Vec::new(),
            };
        }
        self.journal
            .append(self.clock.now_ms(), JournalEvent::TeardownStarted);
        let mut stopped = Vec::new();
        let mut pre_terminated = Vec::new();
        let mut states = self.states.lock().unwrap();
        for (name, state) in states.iter_mut() {
            let was_terminal = matches!(*state, ServiceState::Killed | ServiceState::Stopped);
            self.journal.append(
                self.clock.now_ms(),
                JournalEvent::ServiceStopped {
                    service: name.clone(),
                    pre_terminated: was_terminal,
                },
            );
            *state = ServiceState::Stopped;
            if was_terminal {
                pre_terminated.push(name.clone());
            } else {
                stopped.push(name.clone());
            }
        }
        drop(states);
        self.journal
            .append(self.clock.now_ms(), JournalEvent::TornDown);
        self.journal.flush();
        *torn_down = true;
        TeardownSummary {
            already_torn_down: false,
            stopped,
            pre_terminated,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimTopology;
    use crate::time::{VirtualClock, VIRTUAL_EPOCH_MS};

    fn runtime() -> SimRuntime {
        let sue = Arc::new(SimSue::new(SimTopology::demo(), VIRTUAL_EPOCH_MS));
        let clock = VirtualClock::starting_at(VIRTUAL_EPOCH_MS);
        SimRuntime::new(sue, Arc::new(Journal::new()), clock)
    }

    fn cmd(parts: &[&str]) -> Vec<String> {
        parts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn three_service_topology_starts_ready_immediately() {
        let rt = runtime();
        rt.start(120_000).unwrap();
        for name in rt.services() {
            assert_eq!(rt.state_of(&name), Some(ServiceState::Ready));
        }
    }

    #[test]
    fn tc_add_and_del_round_trip() {
        let rt = runtime();
        rt.start(0).unwrap();
        let add = cmd(&[
            "tc", "qdisc", "add", "dev", "eth0", "root", "netem", "loss", "50%",
        ]);
        assert_eq!(
            rt.exec("recommendation-service", &add).unwrap().exit_code,
            0
        );
        // second add fails like the real tool
        assert_ne!(
            rt.exec("recommendation-service", &add).unwrap().exit_code,
            0
        );
        let del = cmd(&["tc", "qdisc", "del", "dev", "eth0", "root"]);
        assert_eq!(
            rt.exec("recommendation-service", &del).unwrap().exit_code,
            0
        );
        assert_ne!(
            rt.exec("recommendation-service", &del).unwrap().exit_code,
            0
        );
    }

    #[test]
    fn netem_delay_with_jitter_parses() {
        let netem = parse_netem(&["delay", "100ms", "10ms", "loss", "5%"]).unwrap();
        assert_eq!(netem.delay_us, 100_000);
        assert_eq!(netem.jitter_us, 10_000);
        assert!((netem.loss_p - 0.05).abs() < 1e-12);
    }

    #[test]
    fn stress_factor_combines_workers_and_load() {
        let stress =
            parse_stress(&["--cpu", "2", "--cpu-load", "50", "--timeout", "120s"]).unwrap();
        assert!((stress.factor - 2.0).abs() < 1e-12);
        assert_eq!(stress.timeout_s, 120);
    }

    #[test]
    fn pause_requires_ready_state() {
        let rt = runtime();
        rt.start(0).unwrap();
        rt.pause("gateway").unwrap();
        assert!(matches!(
            rt.pause("gateway"),
            Err(RuntimeError::InvalidState { .. })
        ));
        rt.unpause("gateway").unwrap();
        assert_eq!(rt.state_of("gateway"), Some(ServiceState::Ready));
    }

    #[test]
    fn teardown_is_idempotent() {
        let rt = runtime();
        rt.start(0).unwrap();
        rt.kill("datastore").unwrap();
        let first = rt.teardown();
        assert!(!first.already_torn_down);
        assert_eq!(first.pre_terminated, vec!["datastore".to_string()]);
        assert_eq!(first.stopped.len(), 2);
        let second = rt.teardown();
        assert!(second.already_torn_down);
    }

    #[test]
    fn journal_pairs_start_and_stop_entries() {
        let rt = runtime();
        rt.start(0).unwrap();
        rt.teardown();
        let entries = rt.journal.entries();
        let ready = entries
            .iter()
            .filter(|e| matches!(e.event, JournalEvent::ServiceReady { .. }))
            .count();
        let stopped = entries
            .iter()
            .filter(|e| matches!(e.event, JournalEvent::ServiceStopped { .. }))
            .count();
        assert_eq!(ready, 3);
        assert_eq!(stopped, 3);
    }
}
