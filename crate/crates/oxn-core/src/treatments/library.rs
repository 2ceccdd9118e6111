//! Built-in treatments.
//!
//! Fault mechanics on the container backend go through `docker pause/kill`
//! and `exec` of traffic-control / stress-ng commands inside the target;
//! the simulated backend interprets the same command strings. The exact
//! strings are documented in `docs/treatments.md`.

use crate::config::{SamplingStrategy, TreatmentAction, TreatmentSpec};
use crate::orchestrator::runtime::{RuntimeApi, ServiceState};

use super::{Treatment, TreatmentError};

pub(super) fn build(spec: &TreatmentSpec) -> Box<dyn Treatment> {
    Box::new(BuiltinTreatment { spec: spec.clone() })
}

struct BuiltinTreatment {
    spec: TreatmentSpec,
}

impl BuiltinTreatment {
    fn service(&self) -> &str {
        self.spec.target_service()
    }

    fn exec_ok(
        &self,
        rt: &dyn RuntimeApi,
        command: Vec<String>,
        on_err: fn(String) -> TreatmentError,
    ) -> Result<(), TreatmentError> {
        let out = rt
            .exec(self.service(), &command)
            .map_err(|e| on_err(e.to_string()))?;
        if out.success() {
            Ok(())
        } else {
            Err(on_err(format!(
                "`{}` exited with {}: {}",
                command.join(" "),
                out.exit_code,
                out.output.trim()
            )))
        }
    }
}

fn tc_add_command(interface: &str, netem_args: &[String]) -> Vec<String> {
    let mut cmd: Vec<String> = ["tc", "qdisc", "add", "dev", interface, "root", "netem"]
        .map(String::from)
        .to_vec();
    cmd.extend_from_slice(netem_args);
    cmd
}

fn tc_del_command(interface: &str) -> Vec<String> {
    ["tc", "qdisc", "del", "dev", interface, "root"]
        .map(String::from)
        .to_vec()
}

impl Treatment for BuiltinTreatment {
    fn spec(&self) -> &TreatmentSpec {
        &self.spec
    }

    fn preconditions(&self, rt: &dyn RuntimeApi) -> Vec<String> {
        let mut violations = Vec::new();
        let service = self.service();
        match rt.state_of(service) {
            None => violations.push(format!("service {service:?} does not exist")),
            Some(ServiceState::Killed | ServiceState::Stopped) => {
                violations.push(format!("service {service:?} is already terminated"))
            }
            _ => {}
        }
        match &self.spec.action {
            TreatmentAction::NetworkDelay { .. }
            | TreatmentAction::PacketLoss { .. }
            | TreatmentAction::PacketCorruption { .. } => {
                let probe = ["tc", "-V"].map(String::from).to_vec();
                match rt.exec(service, &probe) {
                    Ok(out) if out.success() => {}
                    _ => violations
                        .push(format!("traffic-control (tc) not available in {service:?}")),
                }
            }
            TreatmentAction::Stress { .. } => {
                let probe = ["stress-ng", "--version"].map(String::from).to_vec();
                match rt.exec(service, &probe) {
                    Ok(out) if out.success() => {}
                    _ => violations.push(format!("stress-ng not available in {service:?}")),
                }
            }
            _ => {}
        }
        violations
    }

    fn apply(&self, rt: &dyn RuntimeApi) -> Result<(), TreatmentError> {
        let service = self.service();
        match &self.spec.action {
            TreatmentAction::Pause { .. } => rt
                .pause(service)
                .map_err(|e| TreatmentError::ApplyFailed(e.to_string())),
            TreatmentAction::Kill { .. } => rt
                .kill(service)
                .map_err(|e| TreatmentError::ApplyFailed(e.to_string())),
            TreatmentAction::NetworkDelay {
                interface,
                delay_ms,
                jitter_ms,
                ..
            } => {
                let mut args = vec!["delay".to_string(), format!("{delay_ms}ms")];
                if *jitter_ms > 0 {
                    args.push(format!("{jitter_ms}ms"));
                }
                self.exec_ok(
                    rt,
                    tc_add_command(interface, &args),
                    TreatmentError::ApplyFailed,
                )
            }
            TreatmentAction::PacketLoss {
                interface,
                loss_percentage,
                ..
            } => {
                let args = vec!["loss".to_string(), format!("{loss_percentage}%")];
                self.exec_ok(
                    rt,
                    tc_add_command(interface, &args),
                    TreatmentError::ApplyFailed,
                )
            }
            TreatmentAction::PacketCorruption {
                interface,
                corrupt_percentage,
                ..
            } => {
                let args = vec!["corrupt".to_string(), format!("{corrupt_percentage}%")];
                self.exec_ok(
                    rt,
                    tc_add_command(interface, &args),
                    TreatmentError::ApplyFailed,
                )
            }
            TreatmentAction::Stress {
                duration,
                stressor,
                workers,
                load_percent,
                ..
            } => {
                let mut cmd = vec![
                    "stress-ng".to_string(),
                    stressor.flag().to_string(),
                    workers.to_string(),
                ];
                if matches!(stressor, crate::config::Stressor::Cpu) {
                    cmd.push("--cpu-load".to_string());
                    cmd.push(load_percent.to_string());
                }
                cmd.push("--timeout".to_string());
                cmd.push(format!("{}s", duration.as_millis().div_ceil(1000)));
                self.exec_ok(rt, cmd, TreatmentError::ApplyFailed)
            }
            TreatmentAction::MetricSamplingRate {
                export_interval, ..
            } => rt
                .patch_env(
                    service,
                    "OTEL_METRIC_EXPORT_INTERVAL",
                    &export_interval.as_millis().to_string(),
                )
                .map_err(|e| TreatmentError::ApplyFailed(e.to_string())),
            TreatmentAction::TracingSamplingRate { rate, .. } => rt
                .patch_env(service, "OTEL_TRACES_SAMPLER", "traceidratio")
                .and_then(|_| rt.patch_env(service, "OTEL_TRACES_SAMPLER_ARG", &rate.to_string()))
                .map_err(|e| TreatmentError::ApplyFailed(e.to_string())),
            TreatmentAction::TracingSamplingStrategy { strategy, .. } => {
                let result = match strategy {
                    SamplingStrategy::Always => {
                        rt.patch_env(service, "OTEL_TRACES_SAMPLER", "always_on")
                    }
                    SamplingStrategy::Never => {
                        rt.patch_env(service, "OTEL_TRACES_SAMPLER", "always_off")
                    }
                    SamplingStrategy::Probabilistic { rate } => rt
                        .patch_env(service, "OTEL_TRACES_SAMPLER", "traceidratio")
                        .and_then(|_| {
                            rt.patch_env(service, "OTEL_TRACES_SAMPLER_ARG", &rate.to_string())
                        }),
                };
                result.map_err(|e| TreatmentError::ApplyFailed(e.to_string()))
            }
        }
    }

    fn revert(&self, rt: &dyn RuntimeApi) -> Result<(), TreatmentError> {
        let service = self.service();
        match &self.spec.action {
            TreatmentAction::Pause { .. } => rt
                .unpause(service)
                .map_err(|e| TreatmentError::RevertFailed(e.to_string())),
            TreatmentAction::Kill { .. } => Err(TreatmentError::NonRevertible),
            TreatmentAction::NetworkDelay { interface, .. }
            | TreatmentAction::PacketLoss { interface, .. }
            | TreatmentAction::PacketCorruption { interface, .. } => {
                self.exec_ok(rt, tc_del_command(interface), TreatmentError::RevertFailed)
            }
            TreatmentAction::Stress { .. } => {
                // stress-ng self-terminates via --timeout; pkill is belt and
                // braces, exit 1 (no process matched) is fine.
                let cmd = ["pkill", "stress-ng"].map(String::from).to_vec();
                let out = rt
                    .exec(service, &cmd)
                    .map_err(|e| TreatmentError::RevertFailed(e.to_string()))?;
                if out.exit_code <= 1 {
                    Ok(())
                } else {
                    Err(TreatmentError::RevertFailed(format!(
                        "pkill exited with {}",
                        out.exit_code
                    )))
                }
            }
            // instrumentation patches are baked into the model pre-start
            _ => Ok(()),
        }
    }
}
