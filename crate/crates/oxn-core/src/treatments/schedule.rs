//! Fault schedule planning and the sequential fault scheduler.
//!
//! Faults run one at a time in file order. Spacing is derived from the
//! response windows so labeled baseline data always exists around each
//! fault: the first fault starts after the largest left window, and
//! consecutive faults are separated by the largest window overall.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::config::{ExperimentSpec, Phase, TreatmentAction, TreatmentSpec};
use crate::orchestrator::journal::{Journal, JournalEvent};
use crate::orchestrator::runtime::RuntimeApi;

use super::{
    build_treatment, record_params, Treatment, TreatmentError, TreatmentRecord, TreatmentStatus,
};

/// Minimum spacing between fault windows, so labeling windows are always
/// strictly disjoint even with zero-width response windows.
const MIN_GAP_MS: u64 = 1000;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error(
        "schedule exceeds run_time: needs at least {required_ms}ms ({} s) but run_time is {run_time_ms}ms",
        required_ms / 1000
    )]
    Overflow { required_ms: u64, run_time_ms: u64 },
}

/// One planned fault: when it starts relative to load start, and for how long.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleEntry {
    pub spec: TreatmentSpec,
    pub offset_ms: u64,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentSchedule {
    pub entries: Vec<ScheduleEntry>,
    pub warmup_ms: u64,
    pub gap_ms: u64,
    pub tail_ms: u64,
    /// Smallest run_time that fits this plan.
    pub required_run_time_ms: u64,
}

impl TreatmentSchedule {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Plan the fault schedule for an experiment. Pure: same spec, same plan.
pub fn plan_schedule(spec: &ExperimentSpec) -> Result<TreatmentSchedule, ScheduleError> {
    let max_left = spec
        .responses
        .iter()
        .map(|r| r.left_window.as_millis())
        .max()
        .unwrap_or(0);
    let max_right = spec
        .responses
        .iter()
        .map(|r| r.right_window.as_millis())
        .max()
        .unwrap_or(0);
    let gap_ms = max_left.max(max_right).max(MIN_GAP_MS);

    let mut entries = Vec::new();
    let mut cursor = max_left;
    for treatment in spec.treatments.iter().filter(|t| t.phase() == Phase::Fault) {
        let duration_ms = treatment
            .action
            .duration()
            .expect("fault treatments carry a duration")
            .as_millis();
        if !entries.is_empty() {
            cursor += gap_ms;
        }
        entries.push(ScheduleEntry {
            spec: treatment.clone(),
            offset_ms: cursor,
            duration_ms,
        });
        cursor += duration_ms;
    }

    let required_run_time_ms = if entries.is_empty() {
        0
    } else {
        cursor + max_right
    };
    let run_time_ms = spec.loadgen.run_time.as_millis();
    if required_run_time_ms > run_time_ms {
        return Err(ScheduleError::Overflow {
            required_ms: required_run_time_ms,
            run_time_ms,
        });
    }
    Ok(TreatmentSchedule {
        entries,
        warmup_ms: max_left,
        gap_ms,
        tail_ms: max_right,
        required_run_time_ms,
    })
}

/// Abort signal from the scheduler; the engine tears the run down.
#[derive(Debug, Error)]
#[error("treatment {treatment:?}: {error}")]
pub struct SchedulerAbort {
    pub treatment: String,
    #[source]
    pub error: TreatmentError,
}

struct ActiveFault {
    index: usize,
    start_ms: u64,
    revert_at_ms: u64,
}

/// Applies the planned faults sequentially against the runtime. The
/// scheduler is the only fault-phase writer; it is driven by the engine
/// clock, one call per tick.
pub struct FaultScheduler<'a> {
    treatments: Vec<Box<dyn Treatment>>,
    entries: Vec<ScheduleEntry>,
    next: usize,
    active: Option<ActiveFault>,
    records: Vec<TreatmentRecord>,
    killed: BTreeSet<String>,
    taints: Vec<String>,
    load_start_ms: u64,
    journal: &'a Journal,
}

impl<'a> FaultScheduler<'a> {
    pub fn new(schedule: &TreatmentSchedule, load_start_ms: u64, journal: &'a Journal) -> Self {
        FaultScheduler {
            treatments: schedule
                .entries
                .iter()
                .map(|e| build_treatment(&e.spec))
                .collect(),
            entries: schedule.entries.clone(),
            next: 0,
            active: None,
            records: Vec::new(),
            killed: BTreeSet::new(),
            taints: Vec::new(),
            load_start_ms,
            journal,
        }
    }

    pub fn done(&self) -> bool {
        self.active.is_none() && self.next >= self.entries.len()
    }

    pub fn records(&self) -> &[TreatmentRecord] {
        &self.records
    }

    pub fn taints(&self) -> &[String] {
        &self.taints
    }

    pub fn into_outcome(self) -> (Vec<TreatmentRecord>, Vec<String>) {
        (self.records, self.taints)
    }

    /// Advance the schedule to `now_ms`. Applies at most one fault per call;
    /// reverts whatever is due first.
    pub fn on_tick(&mut self, now_ms: u64, rt: &dyn RuntimeApi) -> Result<(), SchedulerAbort> {
        if let Some(active) = &self.active {
            if now_ms >= active.revert_at_ms {
                self.end_active(now_ms, rt);
            }
        }
        while self.active.is_none() && self.next < self.entries.len() {
            let due_at = self.load_start_ms + self.entries[self.next].offset_ms;
            if now_ms < due_at {
                break;
            }
            let entry = self.entries[self.next].clone();
            let target = entry.spec.target_service().to_string();
            if self.killed.contains(&target) {
                let reason =
                    format!("target service {target:?} was killed earlier in the schedule");
                self.journal.append(
                    now_ms,
                    JournalEvent::TreatmentSkipped {
                        treatment: entry.spec.name.clone(),
                        reason: reason.clone(),
                    },
                );
                self.records.push(TreatmentRecord {
                    treatment: entry.spec.name.clone(),
                    action: entry.spec.action.action_name().to_string(),
                    phase: Phase::Fault,
                    service: target,
                    params: record_params(&entry.spec),
                    start_ms: now_ms,
                    end_ms: now_ms,
                    status: TreatmentStatus::Skipped,
                    error: Some(reason),
                });
                self.next += 1;
                continue;
            }
            self.apply_next(now_ms, rt)?;
        }
        Ok(())
    }

    fn apply_next(&mut self, now_ms: u64, rt: &dyn RuntimeApi) -> Result<(), SchedulerAbort> {
        let entry = &self.entries[self.next];
        let treatment = &self.treatments[self.next];
        let name = entry.spec.name.clone();

        let violations = treatment.preconditions(rt);
        if !violations.is_empty() {
            let error = TreatmentError::PreconditionFailed { violations };
            self.journal.append(
                now_ms,
                JournalEvent::TreatmentFailed {
                    treatment: name.clone(),
                    error: error.to_string(),
                },
            );
            self.push_failed_record(now_ms, &error.to_string());
            return Err(SchedulerAbort {
                treatment: name,
                error,
            });
        }

        if let Err(error) = treatment.apply(rt) {
            self.journal.append(
                now_ms,
                JournalEvent::TreatmentFailed {
                    treatment: name.clone(),
                    error: error.to_string(),
                },
            );
            self.push_failed_record(now_ms, &error.to_string());
            return Err(SchedulerAbort {
                treatment: name,
                error,
            });
        }

        let applied = self.journal.append(
            now_ms,
            JournalEvent::TreatmentApplied {
                treatment: name,
                action: entry.spec.action.action_name().to_string(),
                service: entry.spec.target_service().to_string(),
            },
        );
        if matches!(entry.spec.action, TreatmentAction::Kill { .. }) {
            self.killed.insert(entry.spec.target_service().to_string());
        }
        self.active = Some(ActiveFault {
            index: self.next,
            start_ms: applied.t_ms,
            revert_at_ms: applied.t_ms + entry.duration_ms,
        });
        self.next += 1;
        Ok(())
    }

    fn push_failed_record(&mut self, now_ms: u64, error: &str) {
        let entry = &self.entries[self.next];
        self.records.push(TreatmentRecord {
            treatment: entry.spec.name.clone(),
            action: entry.spec.action.action_name().to_string(),
            phase: Phase::Fault,
            service: entry.spec.target_service().to_string(),
            params: record_params(&entry.spec),
            start_ms: now_ms,
            end_ms: now_ms,
            status: TreatmentStatus::Failed,
            error: Some(error.to_string()),
        });
        self.next += 1;
    }

    fn end_active(&mut self, now_ms: u64, rt: &dyn RuntimeApi) {
        let Some(active) = self.active.take() else {
            return;
        };
        let entry = &self.entries[active.index];
        let treatment = &self.treatments[active.index];
        let name = entry.spec.name.clone();

        let mut record = TreatmentRecord {
            treatment: name.clone(),
            action: entry.spec.action.action_name().to_string(),
            phase: Phase::Fault,
            service: entry.spec.target_service().to_string(),
            params: record_params(&entry.spec),
            start_ms: active.start_ms,
            end_ms: active.revert_at_ms,
            status: TreatmentStatus::Applied,
            error: None,
        };

        if treatment.is_revertible() {
            match treatment.revert(rt) {
                Ok(()) => {
                    let entry_r = self
                        .journal
                        .append(now_ms, JournalEvent::TreatmentReverted { treatment: name });
                    record.end_ms = entry_r.t_ms;
                    record.status = TreatmentStatus::Reverted;
                }
                Err(error) => {
                    self.journal.append(
                        now_ms,
                        JournalEvent::TreatmentFailed {
                            treatment: name.clone(),
                            error: error.to_string(),
                        },
                    );
                    record.end_ms = now_ms;
                    record.status = TreatmentStatus::Failed;
                    record.error = Some(error.to_string());
                    self.taints
                        .push(format!("revert of {name:?} failed: {error}"));
                    // if the target is gone, skip anything still aimed at it
                    if rt.state_of(entry.spec.target_service()).is_none_or(|s| {
                        matches!(
                            s,
                            crate::orchestrator::runtime::ServiceState::Killed
                                | crate::orchestrator::runtime::ServiceState::Stopped
                        )
                    }) {
                        self.killed.insert(entry.spec.target_service().to_string());
                    }
                }
            }
        } else {
            // no recovery by design; the window closes at its planned end
            self.journal
                .append(now_ms, JournalEvent::TreatmentExpired { treatment: name });
        }
        self.records.push(record);
    }

    /// Close out the schedule at the end of the run: revert anything still
    /// active and mark unreached entries as skipped.
    pub fn finish(&mut self, now_ms: u64, rt: &dyn RuntimeApi) {
        if self.active.is_some() {
            self.end_active(now_ms, rt);
        }
        while self.next < self.entries.len() {
            let entry = &self.entries[self.next];
            let reason = "run ended before the planned offset".to_string();
            self.journal.append(
                now_ms,
                JournalEvent::TreatmentSkipped {
                    treatment: entry.spec.name.clone(),
                    reason: reason.clone(),
                },
            );
            self.records.push(TreatmentRecord {
                treatment: entry.spec.name.clone(),
                action: entry.spec.action.action_name().to_string(),
                phase: Phase::Fault,
                service: entry.spec.target_service().to_string(),
                params: record_params(&entry.spec),
                start_ms: now_ms,
                end_ms: now_ms,
                status: TreatmentStatus::Skipped,
                error: Some(reason),
            });
            self.next += 1;
        }
    }
}
