//! The simulated SUE's state machine: request handling, treatment
//! modifiers and telemetry buffers.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::TaskSpec;
use crate::loadgen::{TaskOutcome, VirtualRequestClient};
use crate::orchestrator::SueModel;

use super::SimTopology;

/// How long a caller waits for an unresponsive downstream before failing.
pub const CLIENT_TIMEOUT_MS: f64 = 2_000.0;

/// Default metric export interval when no instrumentation sets one.
const DEFAULT_EXPORT_INTERVAL_MS: u64 = 1_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(super) enum Sampler {
    Always,
    Never,
    Ratio(f64),
}

impl Sampler {
    fn keeps(&self, draw: f64) -> bool {
        match self {
            Sampler::Always => true,
            Sampler::Never => false,
            Sampler::Ratio(p) => draw < *p,
        }
    }
}

/// Effective per-service modifiers; all neutral by default.
#[derive(Debug, Clone)]
pub(super) struct ServiceState {
    pub paused: bool,
    pub killed: bool,
    /// netem qdisc installed on the service interface, if any.
    pub qdisc: Option<Qdisc>,
    /// Latency multiplier while stressed, with its expiry instant.
    pub stress: Option<Stress>,
    pub export_interval_ms: u64,
    pub sampler: Sampler,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(super) struct Qdisc {
    pub delay_us: u64,
    pub jitter_us: u64,
    pub loss_p: f64,
    pub corrupt_p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(super) struct Stress {
    pub factor: f64,
    pub until_us: u64,
}

impl Default for ServiceState {
    fn default() -> Self {
        ServiceState {
            paused: false,
            killed: false,
            qdisc: None,
            stress: None,
            export_interval_ms: DEFAULT_EXPORT_INTERVAL_MS,
            sampler: Sampler::Always,
        }
    }
}

/// One buffered span, compact; names are interned indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(super) struct SpanRow {
    pub trace_seq: u64,
    pub span_seq: u16,
    pub service: u16,
    pub operation: u16,
    pub start_us: u64,
    pub duration_us: u32,
    pub error: bool,
}

/// A materialized span as collectors see it.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanRecord {
    pub trace_id: String,
    pub span_id: String,
    pub service: String,
    pub operation: String,
    pub start_us: u64,
    pub duration_us: u64,
    pub error: bool,
}

pub(super) struct Buffers {
    /// Per service: request arrival instants (µs), appended in tick order.
    pub counter_events: Vec<Vec<u64>>,
    pub counter_sorted: Vec<bool>,
    pub spans: Vec<SpanRow>,
    pub spans_sorted: bool,
    pub trace_seq: u64,
    pub operations: Vec<String>,
    op_index: BTreeMap<String, u16>,
}

impl Buffers {
    fn new(services: usize) -> Buffers {
        Buffers {
            counter_events: vec![Vec::new(); services],
            counter_sorted: vec![true; services],
            spans: Vec::new(),
            spans_sorted: true,
            trace_seq: 0,
            operations: Vec::new(),
            op_index: BTreeMap::new(),
        }
    }

    fn intern_op(&mut self, op: &str) -> u16 {
        if let Some(&i) = self.op_index.get(op) {
            return i;
        }
        let i = self.operations.len() as u16;
        self.operations.push(op.to_string());
        self.op_index.insert(op.to_string(), i);
        i
    }
}

pub(super) struct SimMutable {
    pub services: Vec<ServiceState>,
    pub buffers: Buffers,
}

/// The simulated system under experiment.
pub struct SimSue {
    pub(super) topology: SimTopology,
    pub(super) counter_names: Vec<String>,
    /// Epoch ms when the system started; export timers are anchored here.
    pub(super) start_epoch_ms: u64,
    pub(super) state: Mutex<SimMutable>,
}

impl SimSue {
    pub fn new(topology: SimTopology, start_epoch_ms: u64) -> SimSue {
        let counter_names = topology.services.iter().map(|s| s.counter_name()).collect();
        let services = vec![ServiceState::default(); topology.services.len()];
        let buffers = Buffers::new(topology.services.len());
        SimSue {
            topology,
            counter_names,
            start_epoch_ms,
            state: Mutex::new(SimMutable { services, buffers }),
        }
    }

    /// Build from a topology plus the effective service model, reading
    /// instrumentation from each service's environment.
    pub fn from_model(topology: SimTopology, model: &SueModel, start_epoch_ms: u64) -> SimSue {
        let sue = SimSue::new(topology, start_epoch_ms);
        {
            let mut state = sue.state.lock().unwrap();
            for (i, service) in sue.topology.services.iter().enumerate() {
                let Some(env) = model.env_of(&service.name) else {
                    continue;
                };
                if let Some(ms) = env
                    .get("OTEL_METRIC_EXPORT_INTERVAL")
                    .and_then(|v| v.parse().ok())
                {
                    if ms > 0 {
                        state.services[i].export_interval_ms = ms;
                    }
                }
                match env.get("OTEL_TRACES_SAMPLER").map(String::as_str) {
                    Some("always_on") => state.services[i].sampler = Sampler::Always,
                    Some("always_off") => state.services[i].sampler = Sampler::Never,
                    Some("traceidratio") => {
                        let rate = env
                            .get("OTEL_TRACES_SAMPLER_ARG")
                            .and_then(|v| v.parse::<f64>().ok())
                            .unwrap_or(1.0);
                        state.services[i].sampler = Sampler::Ratio(rate.clamp(0.0, 1.0));
                    }
                    _ => {}
                }
            }
        }
        sue
    }

    pub fn topology(&self) -> &SimTopology {
        &self.topology
    }

    pub fn service_names(&self) -> Vec<String> {
        self.topology
            .services
            .iter()
            .map(|s| s.name.clone())
            .collect()
    }

    pub fn start_epoch_ms(&self) -> u64 {
        self.start_epoch_ms
    }

    pub(super) fn index_of(&self, service: &str) -> Option<usize> {
        self.topology.index_of(service)
    }

    pub fn with_service_state<R>(
        &self,
        service: &str,
        f: impl FnOnce(&mut ServiceStateView) -> R,
    ) -> Option<R> {
        let idx = self.index_of(service)?;
        let mut state = self.state.lock().unwrap();
        let mut view = ServiceStateView {
            state: &mut state.services[idx],
        };
        Some(f(&mut view))
    }

    /// Total requests a service has processed so far.
    pub fn request_count(&self, service: &str) -> u64 {
        match self.index_of(service) {
            Some(i) => self.state.lock().unwrap().buffers.counter_events[i].len() as u64,
            None => 0,
        }
    }

    /// Handle one request entering at the topology entry point.
    ///
    /// Per hop: the request is dropped with the hop's loss probability
    /// (caller times out), paused/killed hops never answer, the response is
    /// corrupted with the corrupt probability, intrinsic errors fire with
    /// `error_rate`, and latency is base x stress x jitter plus any netem
    /// delay. One span per processing hop (subject to the entry sampler)
    /// and one counter increment per processing hop are recorded.
    pub fn handle_request(
        &self,
        task: &TaskSpec,
        start_us: u64,
        rng: &mut ChaCha8Rng,
    ) -> TaskOutcome {
        let entry = self
            .index_of(&self.topology.entry)
            .expect("entry validated");
        let mut state = self.state.lock().unwrap();

        // the trace sampling decision is made once per request at the entry
        // service; the draw is always consumed to keep streams aligned
        // across instrumentation configurations
        let sample_draw = rng.gen::<f64>();
        let sampled = state.services[entry].sampler.keeps(sample_draw);

        let trace_seq = state.buffers.trace_seq;
        state.buffers.trace_seq += 1;

        let mut walk = Walk {
            sim: self,
            state: &mut state,
            rng,
            sampled,
            trace_seq,
            span_seq: 0,
            entry_op: format!("{} {}", task.verb.as_str(), task.endpoint),
        };
        let result = walk.visit(entry, start_us, true);

        let status = match result.outcome {
            HopOutcome::Ok => 200,
            HopOutcome::Corrupted | HopOutcome::Error => 500,
            HopOutcome::NoResponse => 503,
        };
        TaskOutcome {
            status,
            latency_ms: (result.end_us - start_us) as f64 / 1000.0,
        }
    }

    /// Stable snapshot of spans within `[t0_us, t1_us]`, optionally filtered
    /// by service and operation, ordered by (start, trace, span).
    pub fn spans_between(
        &self,
        service: Option<&str>,
        operation: Option<&str>,
        t0_us: u64,
        t1_us: u64,
    ) -> Vec<SpanRecord> {
        let mut state = self.state.lock().unwrap();
        if !state.buffers.spans_sorted {
            state
                .buffers
                .spans
                .sort_unstable_by_key(|s| (s.start_us, s.trace_seq, s.span_seq));
            state.buffers.spans_sorted = true;
        }
        let service_idx = service.map(|s| self.index_of(s));
        if let Some(None) = service_idx {
            return Vec::new();
        }
        let buffers = &state.buffers;
        buffers
            .spans
            .iter()
            .filter(|s| s.start_us >= t0_us && s.start_us <= t1_us)
            .filter(|s| service_idx.is_none_or(|idx| Some(s.service as usize) == idx))
            .filter(|s| operation.is_none_or(|op| buffers.operations[s.operation as usize] == op))
            .map(|s| SpanRecord {
                trace_id: format!("{:032x}", s.trace_seq),
                span_id: format!("{:016x}", ((s.trace_seq << 8) | s.span_seq as u64)),
                service: self.topology.services[s.service as usize].name.clone(),
                operation: buffers.operations[s.operation as usize].clone(),
                start_us: s.start_us,
                duration_us: s.duration_us as u64,
                error: s.error,
            })
            .collect()
    }
}

/// Mutable view over one service's treatment modifiers.
pub struct ServiceStateView<'a> {
    state: &'a mut ServiceState,
}

impl ServiceStateView<'_> {
    pub fn set_paused(&mut self, paused: bool) {
        self.state.paused = paused;
    }
    pub fn is_paused(&self) -> bool {
        self.state.paused
    }
    pub fn set_killed(&mut self) {
        self.state.killed = true;
    }
    pub fn is_killed(&self) -> bool {
        self.state.killed
    }
    pub fn install_qdisc(
        &mut self,
        delay_us: u64,
        jitter_us: u64,
        loss_p: f64,
        corrupt_p: f64,
    ) -> bool {
        if self.state.qdisc.is_some() {
            return false;
        }
        self.state.qdisc = Some(Qdisc {
            delay_us,
            jitter_us,
            loss_p,
            corrupt_p,
        });
        true
    }
    pub fn remove_qdisc(&mut self) -> bool {
        self.state.qdisc.take().is_some()
    }
    pub fn set_stress(&mut self, factor: f64, until_us: u64) {
        self.state.stress = Some(Stress { factor, until_us });
    }
    pub fn clear_stress(&mut self) -> bool {
        self.state.stress.take().is_some()
    }
    pub fn set_export_interval_ms(&mut self, ms: u64) {
        self.state.export_interval_ms = ms.max(1);
    }
    pub fn export_interval_ms(&self) -> u64 {
        self.state.export_interval_ms
    }
    pub fn set_sampler_always(&mut self) {
        self.state.sampler = Sampler::Always;
    }
    pub fn set_sampler_never(&mut self) {
        self.state.sampler = Sampler::Never;
    }
    pub fn set_sampler_ratio(&mut self, rate: f64) {
        self.state.sampler = Sampler::Ratio(rate.clamp(0.0, 1.0));
    }
}

enum HopOutcome {
    Ok,
    /// A hop (or its downstream chain) never answered; the caller timed out.
    NoResponse,
    Corrupted,
    Error,
}

struct HopResult {
    outcome: HopOutcome,
    end_us: u64,
}

struct Walk<'a, 'b> {
    sim: &'a SimSue,
    state: &'a mut SimMutable,
    rng: &'b mut ChaCha8Rng,
    sampled: bool,
    trace_seq: u64,
    span_seq: u16,
    entry_op: String,
}

impl Walk<'_, '_> {
    /// Visit one service at `arrive_us`. Draw order per visited hop is
    /// fixed (loss, corrupt, error, jitter) so telemetry is reproducible.
    fn visit(&mut self, idx: usize, arrive_us: u64, is_entry: bool) -> HopResult {
        let loss_draw = self.rng.gen::<f64>();
        let corrupt_draw = self.rng.gen::<f64>();
        let error_draw = self.rng.gen::<f64>();
        let jitter_draw = self.rng.gen::<f64>();

        let svc = &self.state.services[idx];
        let timeout_us = (CLIENT_TIMEOUT_MS * 1000.0) as u64;

        // the request never reaches a dead or suspended process
        if svc.killed || svc.paused {
            return HopResult {
                outcome: HopOutcome::NoResponse,
                end_us: arrive_us + timeout_us,
            };
        }
        // netem loss on the service interface drops the request packet
        let qdisc = svc.qdisc.unwrap_or_default();
        if loss_draw < qdisc.loss_p {
            return HopResult {
                outcome: HopOutcome::NoResponse,
                end_us: arrive_us + timeout_us,
            };
        }

        // the hop processes the request: count it on arrival
        if self.state.buffers.counter_events[idx]
            .last()
            .is_some_and(|&last| last > arrive_us)
        {
            self.state.buffers.counter_sorted[idx] = false;
        }
        self.state.buffers.counter_events[idx].push(arrive_us);

        // downstream calls happen first, sequentially; first failure aborts
        let mut cursor_us = arrive_us;
        let mut failure: Option<HopOutcome> = None;
        let downstream: Vec<usize> = self.sim.topology.services[idx]
            .downstream
            .iter()
            .map(|d| self.sim.topology.index_of(d).expect("validated"))
            .collect();
        for child in downstream {
            let result = self.visit(child, cursor_us, false);
            cursor_us = result.end_us;
            match result.outcome {
                HopOutcome::Ok => {}
                other => {
                    failure = Some(other);
                    break;
                }
            }
        }

        // own processing time
        let svc = &self.state.services[idx];
        let stress_factor = match svc.stress {
            Some(s) if arrive_us < s.until_us => s.factor,
            _ => 1.0,
        };
        let base_us = self.sim.topology.services[idx].base_latency_ms * 1000.0;
        let jitter = 0.9 + 0.2 * jitter_draw;
        let mut own_us = (base_us * stress_factor * jitter).round() as u64;
        own_us += qdisc.delay_us;
        if qdisc.jitter_us > 0 {
            // netem jitter reuses the same uniform draw, centered on zero
            let offset = ((jitter_draw - 0.5) * 2.0 * qdisc.jitter_us as f64).round() as i64;
            own_us = own_us.saturating_add_signed(offset);
        }
        cursor_us += own_us;

        let outcome = match failure {
            Some(f) => f,
            None if error_draw < self.sim.topology.services[idx].error_rate => HopOutcome::Error,
            None if corrupt_draw < qdisc.corrupt_p => HopOutcome::Corrupted,
            None => HopOutcome::Ok,
        };

        if self.sampled {
            let op = if is_entry {
                self.entry_op.clone()
            } else {
                "handle".to_string()
            };
            let operation = self.state.buffers.intern_op(&op);
            let row = SpanRow {
                trace_seq: self.trace_seq,
                span_seq: self.span_seq,
                service: idx as u16,
                operation,
                start_us: arrive_us,
                duration_us: (cursor_us - arrive_us).min(u32::MAX as u64) as u32,
                error: !matches!(outcome, HopOutcome::Ok),
            };
            self.span_seq += 1;
            if let Some(last) = self.state.buffers.spans.last() {
                if last.start_us > row.start_us {
                    self.state.buffers.spans_sorted = false;
                }
            }
            self.state.buffers.spans.push(row);
        }

        HopResult {
            outcome,
            end_us: cursor_us,
        }
    }
}

impl VirtualRequestClient for std::sync::Arc<SimSue> {
    fn execute(&self, task: &TaskSpec, start_us: u64, rng: &mut ChaCha8Rng) -> TaskOutcome {
        self.handle_request(task, start_us, rng)
    }
}
