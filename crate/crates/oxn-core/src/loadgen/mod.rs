//! Staged load generation.
//!
//! A closed workload: a population of virtual users that each loop
//! pick-task, issue-request, wait-for-response. Stages ramp the population
//! toward a target at a spawn rate, then hold; arbitrary load shapes fall
//! out of chaining stages.

mod runner;

use serde::Serialize;
use thiserror::Error;

pub use runner::{
    run_load, unreachable_streak, user_rng, HttpTaskClient, TaskOutcome, TickLoadRunner,
    VirtualRequestClient, WallLoadRunner,
};

use crate::config::{LoadgenSpec, TaskSpec};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("load profile error: {0}")]
    Profile(String),
    #[error(
        "target unreachable: all requests failed for {seconds} consecutive seconds (t={at_s}s)"
    )]
    TargetUnreachable { at_s: u64, seconds: u64 },
}

/// Abort when every request fails for this many consecutive seconds.
pub const UNREACHABLE_ABORT_SECS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SegmentKind {
    /// Population moves from `from` toward `to` at `rate` users/second.
    Ramp {
        from: u32,
        to: u32,
        rate: f64,
    },
    Hold {
        users: u32,
    },
}

/// One piece of the piecewise user curve, `[start_ms, end_ms)` from load start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start_ms: u64,
    pub end_ms: u64,
    pub kind: SegmentKind,
}

/// The compiled piecewise user curve covering `[0, run_time)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfile {
    pub segments: Vec<Segment>,
    pub run_time_ms: u64,
}

/// Compile the staged description into the piecewise curve. Each stage
/// becomes a ramp from the previous user count toward its target followed
/// by a hold for the stage remainder; if stages end before run_time the
/// final count holds.
pub fn compile_load_profile(spec: &LoadgenSpec) -> Result<LoadProfile, LoadError> {
    let run_time_ms = spec.run_time.as_millis();
    let mut segments = Vec::new();
    let mut cursor: u64 = 0;
    let mut prev_users: u32 = 0;

    for (i, stage) in spec.stages.iter().enumerate() {
        let stage_ms = stage.duration.as_millis();
        let delta = stage.users.abs_diff(prev_users);
        let ramp_ms = if delta == 0 {
            0
        } else {
            (delta as f64 * 1000.0 / stage.spawn_rate).ceil() as u64
        };
        if ramp_ms > stage_ms {
            return Err(LoadError::Profile(format!(
                "stage {i}: ramp {prev_users}->{} at {} users/s needs {ramp_ms}ms but the stage lasts {stage_ms}ms",
                stage.users, stage.spawn_rate
            )));
        }
        if ramp_ms > 0 {
            segments.push(Segment {
                start_ms: cursor,
                end_ms: cursor + ramp_ms,
                kind: SegmentKind::Ramp {
                    from: prev_users,
                    to: stage.users,
                    rate: stage.spawn_rate,
                },
            });
        }
        if stage_ms > ramp_ms {
            segments.push(Segment {
                start_ms: cursor + ramp_ms,
                end_ms: cursor + stage_ms,
                kind: SegmentKind::Hold { users: stage.users },
            });
        }
        cursor += stage_ms;
        prev_users = stage.users;
    }

    if cursor < run_time_ms {
        segments.push(Segment {
            start_ms: cursor,
            end_ms: run_time_ms,
            kind: SegmentKind::Hold { users: prev_users },
        });
    }
    Ok(LoadProfile {
        segments,
        run_time_ms,
    })
}

impl LoadProfile {
    /// User count at `t_ms` from load start. Ramps spawn one user every
    /// `1/rate` seconds, so the count changes in unit steps rounded toward
    /// the previous stage's level.
    pub fn users_at(&self, t_ms: u64) -> Result<u32, LoadError> {
        if t_ms >= self.run_time_ms {
            return Err(LoadError::Profile(format!(
                "t={t_ms}ms is outside the run window [0, {}ms)",
                self.run_time_ms
            )));
        }
        let segment = self
            .segments
            .iter()
            .find(|s| t_ms >= s.start_ms && t_ms < s.end_ms)
            .ok_or_else(|| LoadError::Profile(format!("no segment covers t={t_ms}ms")))?;
        Ok(match segment.kind {
            SegmentKind::Hold { users } => users,
            SegmentKind::Ramp { from, to, rate } => {
                let spawned = ((t_ms - segment.start_ms) as f64 * rate / 1000.0).floor() as u32;
                if to >= from {
                    from.saturating_add(spawned).min(to)
                } else {
                    from.saturating_sub(spawned).max(to)
                }
            }
        })
    }
}

/// One second of load statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SecondBucket {
    /// Seconds since load start.
    pub t_s: u64,
    pub active_users: u32,
    pub requests_sent: u64,
    pub successes: u64,
    pub failures: u64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
}

/// Per-second load statistics plus totals.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadStats {
    pub buckets: Vec<SecondBucket>,
    pub total_sent: u64,
    pub total_successes: u64,
    pub total_failures: u64,
}

impl LoadStats {
    pub fn push_bucket(&mut self, bucket: SecondBucket) {
        self.total_sent += bucket.requests_sent;
        self.total_successes += bucket.successes;
        self.total_failures += bucket.failures;
        self.buckets.push(bucket);
    }

    /// CSV rows matching `loadstats.csv`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "t_s,active_users,requests_sent,successes,failures,p50_ms,p95_ms,p99_ms\n",
        );
        for b in &self.buckets {
            out.push_str(&format!(
                "{},{},{},{},{},{:.3},{:.3},{:.3}\n",
                b.t_s,
                b.active_users,
                b.requests_sent,
                b.successes,
                b.failures,
                b.p50_ms,
                b.p95_ms,
                b.p99_ms
            ));
        }
        out
    }
}

/// Accumulates one bucket at a time; quantiles are exact (nearest-rank).
#[derive(Debug, Default)]
pub struct BucketCollector {
    latencies: Vec<f64>,
    successes: u64,
    failures: u64,
}

impl BucketCollector {
    pub fn record(&mut self, latency_ms: f64, ok: bool) {
        self.latencies.push(latency_ms);
        if ok {
            self.successes += 1;
        } else {
            self.failures += 1;
        }
    }

    pub fn finish(&mut self, t_s: u64, active_users: u32) -> SecondBucket {
        self.latencies
            .sort_by(|a, b| a.partial_cmp(b).expect("latencies are finite"));
        let q = |p: f64| -> f64 {
            if self.latencies.is_empty() {
                return 0.0;
            }
            let rank = ((p * self.latencies.len() as f64).ceil() as usize).max(1);
            self.latencies[rank - 1]
        };
        let bucket = SecondBucket {
            t_s,
            active_users,
            requests_sent: self.successes + self.failures,
            successes: self.successes,
            failures: self.failures,
            p50_ms: q(0.50),
            p95_ms: q(0.95),
            p99_ms: q(0.99),
        };
        self.latencies.clear();
        self.successes = 0;
        self.failures = 0;
        bucket
    }
}

/// Weighted task selection; frequencies converge to the weight ratios.
#[derive(Debug, Clone)]
pub struct TaskChooser {
    tasks: Vec<TaskSpec>,
    cumulative: Vec<u64>,
    total: u64,
}

impl TaskChooser {
    pub fn new(tasks: &[TaskSpec]) -> TaskChooser {
        let mut cumulative = Vec::with_capacity(tasks.len());
        let mut total = 0u64;
        for task in tasks {
            total += task.weight as u64;
            cumulative.push(total);
        }
        TaskChooser {
            tasks: tasks.to_vec(),
            cumulative,
            total,
        }
    }

    pub fn pick(&self, rng: &mut impl rand::Rng) -> &TaskSpec {
        let roll = rng.gen_range(0..self.total);
        let idx = self.cumulative.partition_point(|&c| c <= roll);
        &self.tasks[idx]
    }
}
