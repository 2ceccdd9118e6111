//! Load drivers.
//!
//! [`TickLoadRunner`] is the deterministic driver: virtual users are plain
//! state machines keyed to the experiment clock, advanced one 1-second tick
//! at a time. Request outcomes come from a [`VirtualRequestClient`] — the
//! simulated SUE in practice — and time never races a wall clock, so the
//! measured user curve equals the planned one exactly.
//!
//! [`WallLoadRunner`] drives a real target over HTTP with one worker
//! thread per virtual user slot; the population follows the same profile
//! sampled once per second.

use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TaskSpec;
use crate::minihttp::{parse_url, request, url_encode, Endpoint};

use super::{
    BucketCollector, LoadError, LoadProfile, LoadStats, SecondBucket, TaskChooser,
    UNREACHABLE_ABORT_SECS,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskOutcome {
    pub status: u16,
    pub latency_ms: f64,
}

impl TaskOutcome {
    pub fn ok(&self) -> bool {
        (200..400).contains(&self.status)
    }
}

/// Issues one request at a virtual instant. Implementations must be
/// deterministic given (task, start, rng state).
pub trait VirtualRequestClient: Send + Sync {
    fn execute(&self, task: &TaskSpec, start_us: u64, rng: &mut ChaCha8Rng) -> TaskOutcome;
}

/// Per-user RNG stream: fixed function of (seed, user index), stable across
/// population shrink/regrow.
pub fn user_rng(seed: u64, user_index: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(user_index as u64),
    )
}

struct VirtualUser {
    rng: ChaCha8Rng,
    next_free_us: u64,
}

/// Deterministic closed-workload driver, one call per experiment second.
pub struct TickLoadRunner {
    profile: LoadProfile,
    chooser: TaskChooser,
    load_start_ms: u64,
    seed: u64,
    think_time_us: u64,
    roster: Vec<VirtualUser>,
    collector: BucketCollector,
}

impl TickLoadRunner {
    pub fn new(
        profile: LoadProfile,
        tasks: &[TaskSpec],
        load_start_ms: u64,
        seed: u64,
        think_time_ms: u64,
    ) -> TickLoadRunner {
        TickLoadRunner {
            profile,
            chooser: TaskChooser::new(tasks),
            load_start_ms,
            seed,
            think_time_us: think_time_ms * 1000,
            roster: Vec::new(),
            collector: BucketCollector::default(),
        }
    }

    pub fn ticks(&self) -> u64 {
        self.profile.run_time_ms.div_ceil(1000)
    }

    /// Run the tick starting at `tick_index` seconds after load start.
    /// Active population is exactly `users_at` of the tick instant.
    pub fn tick(&mut self, tick_index: u64, client: &dyn VirtualRequestClient) -> SecondBucket {
        let offset_ms = tick_index * 1000;
        let target = self.profile.users_at(offset_ms).unwrap_or(0) as usize;
        let tick_start_us = (self.load_start_ms + offset_ms) * 1000;
        let tick_end_us = tick_start_us + 1_000_000;

        while self.roster.len() < target {
            let index = self.roster.len() as u32;
            self.roster.push(VirtualUser {
                rng: user_rng(self.seed, index),
                next_free_us: tick_start_us,
            });
        }

        for user in &mut self.roster[..target] {
            if user.next_free_us < tick_start_us {
                user.next_free_us = tick_start_us;
            }
            while user.next_free_us < tick_end_us {
                let start_us = user.next_free_us;
                let task = self.chooser.pick(&mut user.rng).clone();
                let outcome = client.execute(&task, start_us, &mut user.rng);
                self.collector.record(outcome.latency_ms, outcome.ok());
                let busy_us = (outcome.latency_ms * 1000.0).round().max(0.0) as u64;
                user.next_free_us = start_us + busy_us.max(1) + self.think_time_us;
            }
        }
        self.collector.finish(tick_index, target as u32)
    }
}

/// Drive the whole profile against a virtual client. Aborts when every
/// request fails for [`UNREACHABLE_ABORT_SECS`] consecutive seconds.
pub fn run_load(
    profile: &LoadProfile,
    tasks: &[TaskSpec],
    client: &dyn VirtualRequestClient,
    load_start_ms: u64,
    seed: u64,
) -> Result<LoadStats, LoadError> {
    let mut runner = TickLoadRunner::new(profile.clone(), tasks, load_start_ms, seed, 0);
    let mut stats = LoadStats::default();
    let mut consecutive_all_failed = 0u64;
    for tick in 0..runner.ticks() {
        let bucket = runner.tick(tick, client);
        consecutive_all_failed = unreachable_streak(consecutive_all_failed, &bucket);
        stats.push_bucket(bucket);
        if consecutive_all_failed >= UNREACHABLE_ABORT_SECS {
            return Err(LoadError::TargetUnreachable {
                at_s: tick,
                seconds: consecutive_all_failed,
            });
        }
    }
    Ok(stats)
}

/// Advance the target-unreachable streak by one second. A second with
/// failures and no successes starts or extends a streak; a second with no
/// requests at all (users blocked on timeouts) extends one but never
/// starts one; any success resets.
pub fn unreachable_streak(streak: u64, bucket: &SecondBucket) -> u64 {
    let failing = bucket.active_users > 0
        && bucket.successes == 0
        && (bucket.requests_sent > 0 || streak > 0);
    if failing {
        streak + 1
    } else {
        0
    }
}

/// Blocking HTTP client for load tasks against a real target.
/// GET/DELETE carry `params` in the query string, POST/PUT as JSON.
pub struct HttpTaskClient {
    endpoint: Endpoint,
    base_path: String,
    timeout: Duration,
}

impl HttpTaskClient {
    pub fn new(base_url: &str, timeout: Duration) -> Result<HttpTaskClient, LoadError> {
        let (endpoint, base_path) =
            parse_url(base_url).map_err(|e| LoadError::Profile(e.to_string()))?;
        Ok(HttpTaskClient {
            endpoint,
            base_path,
            timeout,
        })
    }

    fn path_for(&self, task: &TaskSpec) -> String {
        let mut path = if self.base_path == "/" {
            task.endpoint.clone()
        } else {
            format!("{}{}", self.base_path.trim_end_matches('/'), task.endpoint)
        };
        if task.verb.params_in_query() && !task.params.is_empty() {
            let query: Vec<String> = task
                .params
                .iter()
                .map(|(k, v)| format!("{}={}", url_encode(k), url_encode(&scalar_text(v))))
                .collect();
            path.push('?');
            path.push_str(&query.join("&"));
        }
        path
    }

    pub fn execute(&self, task: &TaskSpec) -> TaskOutcome {
        let path = self.path_for(task);
        let body = if task.verb.params_in_query() {
            None
        } else {
            let map: serde_json::Map<String, serde_json::Value> = task
                .params
                .iter()
                .map(|(k, v)| (k.clone(), crate::treatments::yaml_to_json(v.clone())))
                .collect();
            Some(serde_json::to_vec(&serde_json::Value::Object(map)).expect("params serialize"))
        };
        let started = Instant::now();
        let result = request(
            &self.endpoint,
            task.verb.as_str(),
            &path,
            &[("Content-Type", "application/json")],
            body.as_deref(),
            self.timeout,
        );
        let latency_ms = started.elapsed().as_secs_f64() * 1000.0;
        match result {
            Ok(resp) => TaskOutcome {
                status: resp.status,
                latency_ms,
            },
            Err(_) => TaskOutcome {
                status: 0,
                latency_ms,
            },
        }
    }
}

fn scalar_text(v: &serde_yaml::Value) -> String {
    match v {
        serde_yaml::Value::String(s) => s.clone(),
        serde_yaml::Value::Number(n) => n.to_string(),
        serde_yaml::Value::Bool(b) => b.to_string(),
        _ => String::new(),
    }
}

enum WorkerEvent {
    Outcome { latency_ms: f64, ok: bool },
}

/// Wall-clock driver for real targets: one thread per virtual user slot,
/// the per-second tick only adjusts the active population and drains
/// finished outcomes into buckets.
pub struct WallLoadRunner {
    profile: LoadProfile,
    active: Arc<AtomicU32>,
    stop: Arc<AtomicBool>,
    events: mpsc::Receiver<WorkerEvent>,
    workers: Vec<std::thread::JoinHandle<()>>,
    collector: BucketCollector,
}

impl WallLoadRunner {
    pub fn new(
        profile: LoadProfile,
        tasks: &[TaskSpec],
        client: Arc<HttpTaskClient>,
        seed: u64,
    ) -> WallLoadRunner {
        let max_users = profile
            .segments
            .iter()
            .map(|s| match s.kind {
                super::SegmentKind::Ramp { from, to, .. } => from.max(to),
                super::SegmentKind::Hold { users } => users,
            })
            .max()
            .unwrap_or(0);
        let active = Arc::new(AtomicU32::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel();
        let chooser = Arc::new(TaskChooser::new(tasks));

        let mut workers = Vec::with_capacity(max_users as usize);
        for index in 0..max_users {
            let active = active.clone();
            let stop = stop.clone();
            let tx = tx.clone();
            let chooser = chooser.clone();
            let client = client.clone();
            workers.push(std::thread::spawn(move || {
                let mut rng = user_rng(seed, index);
                while !stop.load(Ordering::SeqCst) {
                    if index >= active.load(Ordering::SeqCst) {
                        std::thread::sleep(Duration::from_millis(50));
                        continue;
                    }
                    let task = chooser.pick(&mut rng).clone();
                    let outcome = client.execute(&task);
                    let event = WorkerEvent::Outcome {
                        latency_ms: outcome.latency_ms,
                        ok: outcome.ok(),
                    };
                    if tx.send(event).is_err() {
                        break;
                    }
                }
            }));
        }
        WallLoadRunner {
            profile,
            active,
            stop,
            events: rx,
            workers,
            collector: BucketCollector::default(),
        }
    }

    /// Called once per wall second: adjust the population to the profile
    /// and fold everything that completed since the last call into a bucket.
    pub fn tick(&mut self, tick_index: u64) -> SecondBucket {
        let offset_ms = tick_index * 1000;
        let target = self.profile.users_at(offset_ms).unwrap_or(0);
        self.active.store(target, Ordering::SeqCst);
        while let Ok(WorkerEvent::Outcome { latency_ms, ok }) = self.events.try_recv() {
            self.collector.record(latency_ms, ok);
        }
        self.collector.finish(tick_index, target)
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.active.store(0, Ordering::SeqCst);
        for worker in self.workers.drain(..) {
            let _ = worker.join();
        }
    }
}

impl Drop for WallLoadRunner {
    fn drop(&mut self) {
        self.shutdown();
    }
}
