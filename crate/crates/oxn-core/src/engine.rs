//! The run pipeline: parse, validate, build the SUE, start the backend,
//! drive load and faults against the shared experiment clock, collect and
//! label telemetry, detect, persist, report. Any fatal error after setup
//! tears the backend down and leaves a partial report naming the stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{self, ExperimentSpec, Phase, ResponseKind, ValidationReport};
use crate::detection::{detect, detect_traces, summarize, DetectionResult};
use crate::loadgen::{
    compile_load_profile, HttpTaskClient, LoadStats, TickLoadRunner, WallLoadRunner,
    UNREACHABLE_ABORT_SECS,
};
use crate::observation::{
    collect::collect_response, label_frame, write_store, HttpMetricBackend, HttpTraceBackend,
    LabeledFrame, MetricBackend, TraceBackend,
};
use crate::orchestrator::docker::{ContainerRuntime, DockerHost};
use crate::orchestrator::journal::{Journal, JournalEvent};
use crate::orchestrator::{build_sue, write_effective_compose, Runtime, SueModel};
use crate::report::{
    DetectionSection, ExperimentFileInfo, ExperimentReport, LoadSummary, RunFailure, RunStatus,
    ScheduleEntryInfo, ScheduleInfo,
};
use crate::sim::{SimRuntime, SimSue, SimTopology};
use crate::time::{Clock, VirtualClock, WallClock, VIRTUAL_EPOCH_MS};
use crate::treatments::{
    plan_schedule, FaultScheduler, TreatmentRecord, TreatmentSchedule, TreatmentStatus,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendChoice {
    Sim,
    Container,
}

impl BackendChoice {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackendChoice::Sim => "sim",
            BackendChoice::Container => "container",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub backend: BackendChoice,
    /// Overrides the topology seed when set; recorded in the report.
    pub seed: Option<u64>,
    /// Root directory for run artifacts; the run gets a subdirectory.
    pub out_root: PathBuf,
    pub think_time_ms: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            backend: BackendChoice::Sim,
            seed: None,
            out_root: PathBuf::from("runs"),
            think_time_ms: 0,
        }
    }
}

/// Process exit codes for the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunExit {
    Success,
    Validation,
    Orchestration,
    RuntimeAbort,
    ReportIo,
}

impl RunExit {
    pub fn code(&self) -> i32 {
        match self {
            RunExit::Success => 0,
            RunExit::Validation => 1,
            RunExit::Orchestration => 2,
            RunExit::RuntimeAbort => 3,
            RunExit::ReportIo => 4,
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub report: ExperimentReport,
    pub exit: RunExit,
}

/// Failures before the run directory exists; nothing partial to write.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error("cannot read experiment file {path}: {message}")]
    ReadExperiment { path: PathBuf, message: String },
    #[error(transparent)]
    Parse(#[from] config::ParseError),
    #[error("experiment is invalid:\n{0}")]
    Invalid(ValidationReport),
    #[error("cannot set up run directory: {0}")]
    Setup(String),
}

impl EngineError {
    pub fn exit(&self) -> RunExit {
        match self {
            EngineError::Setup(_) => RunExit::ReportIo,
            _ => RunExit::Validation,
        }
    }
}

struct StageFailure {
    stage: &'static str,
    message: String,
    exit: RunExit,
}

fn stage_err(stage: &'static str, exit: RunExit) -> impl FnOnce(String) -> StageFailure {
    move |message| StageFailure {
        stage,
        message,
        exit,
    }
}

fn make_run_id() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("run-{secs:010}-{:04x}", rand::random::<u16>())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Run an experiment file end to end. Pre-setup failures return `Err`;
/// everything later lands in the report (partial on failure) with an exit
/// code in the outcome.
pub fn run_experiment(
    experiment_path: &Path,
    options: &RunOptions,
) -> Result<RunOutcome, EngineError> {
    let total_timer = Instant::now();
    let mut timings: BTreeMap<String, u64> = BTreeMap::new();

    // parse
    let stage_timer = Instant::now();
    let text =
        std::fs::read_to_string(experiment_path).map_err(|e| EngineError::ReadExperiment {
            path: experiment_path.to_path_buf(),
            message: e.to_string(),
        })?;
    let spec = config::parse_experiment(&text)?;
    timings.insert("parse".into(), stage_timer.elapsed().as_millis() as u64);

    // validate
    let stage_timer = Instant::now();
    let base_dir = experiment_path
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let validation = config::validate::validate(&spec, &base_dir);
    if !validation.is_valid() {
        return Err(EngineError::Invalid(validation));
    }
    timings.insert("validate".into(), stage_timer.elapsed().as_millis() as u64);

    // run directory and journal
    let run_id = make_run_id();
    let run_dir = options.out_root.join(&run_id);
    std::fs::create_dir_all(&run_dir).map_err(|e| EngineError::Setup(e.to_string()))?;
    let journal = Arc::new(Journal::new());
    journal
        .attach_sink(&run_dir.join("journal.ndjson"))
        .map_err(|e| EngineError::Setup(e.to_string()))?;

    let mut ctx = RunContext {
        spec,
        text,
        experiment_path: experiment_path.to_path_buf(),
        base_dir,
        run_id,
        run_dir: run_dir.clone(),
        options: options.clone(),
        journal,
        timings,
        seed: options.seed.unwrap_or(0),
        records: Vec::new(),
        schedule_info: None,
        load: None,
        frames: None,
        empty_frames: Vec::new(),
        detection: DetectionSection::default(),
        taints: Vec::new(),
        artifacts: BTreeMap::from([("journal".to_string(), "journal.ndjson".to_string())]),
        runtime: None,
    };

    let result = ctx.execute(total_timer);
    // backstop teardown: idempotent, covers every failure path
    if let Some(runtime) = &ctx.runtime {
        runtime.teardown();
    }
    ctx.timings
        .insert("total".into(), total_timer.elapsed().as_millis() as u64);

    let (status, failure, exit) = match result {
        Ok(()) => (RunStatus::Complete, None, RunExit::Success),
        Err(f) => (
            RunStatus::Failed,
            Some(RunFailure {
                stage: f.stage.to_string(),
                message: f.message,
            }),
            f.exit,
        ),
    };

    let report = ExperimentReport {
        run_id: ctx.run_id.clone(),
        engine_version: crate::ENGINE_VERSION.to_string(),
        backend: options.backend.as_str().to_string(),
        seed: ctx.seed,
        status,
        failure,
        experiment: ExperimentFileInfo {
            path: ctx.experiment_path.display().to_string(),
            sha256: sha256_hex(ctx.text.as_bytes()),
            content: ctx.text.clone(),
        },
        timings_ms: ctx.timings.clone(),
        treatments: ctx.records.clone(),
        schedule: ctx.schedule_info.clone(),
        load: ctx.load.clone(),
        frames: ctx.frames.clone(),
        empty_frames: ctx.empty_frames.clone(),
        detection: ctx.detection.clone(),
        taints: ctx.taints.clone(),
        artifacts: ctx.artifacts.clone(),
    };
    let exit = match report.write(&run_dir) {
        Ok(()) => exit,
        Err(_) if exit == RunExit::Success => RunExit::ReportIo,
        Err(_) => exit,
    };
    Ok(RunOutcome {
        run_dir,
        report,
        exit,
    })
}

struct RunContext {
    spec: ExperimentSpec,
    text: String,
    experiment_path: PathBuf,
    base_dir: PathBuf,
    run_id: String,
    run_dir: PathBuf,
    options: RunOptions,
    journal: Arc<Journal>,
    timings: BTreeMap<String, u64>,
    seed: u64,
    records: Vec<TreatmentRecord>,
    schedule_info: Option<ScheduleInfo>,
    load: Option<LoadSummary>,
    frames: Option<crate::observation::StoreManifest>,
    empty_frames: Vec<String>,
    detection: DetectionSection,
    taints: Vec<String>,
    artifacts: BTreeMap<String, String>,
    runtime: Option<Arc<dyn Runtime>>,
}

impl RunContext {
    fn execute(&mut self, _total: Instant) -> Result<(), StageFailure> {
        // plan (validated, so overflow cannot happen here)
        let schedule = plan_schedule(&self.spec)
            .map_err(|e| stage_err("plan", RunExit::Validation)(e.to_string()))?;
        self.schedule_info = Some(ScheduleInfo {
            warmup_ms: schedule.warmup_ms,
            gap_ms: schedule.gap_ms,
            tail_ms: schedule.tail_ms,
            entries: schedule
                .entries
                .iter()
                .map(|e| ScheduleEntryInfo {
                    treatment: e.spec.name.clone(),
                    offset_ms: e.offset_ms,
                    duration_ms: e.duration_ms,
                })
                .collect(),
        });

        match self.options.backend {
            BackendChoice::Sim => self.execute_sim(schedule),
            BackendChoice::Container => self.execute_container(schedule),
        }
    }

    fn instrumentation_specs(&self) -> Vec<crate::config::TreatmentSpec> {
        self.spec
            .treatments
            .iter()
            .filter(|t| t.phase() == Phase::Instrumentation)
            .cloned()
            .collect()
    }

    fn build_model(&mut self, now_ms: u64) -> Result<SueModel, StageFailure> {
        let timer = Instant::now();
        let instrumentation = self.instrumentation_specs();
        let model = build_sue(
            &self.spec.sue,
            &self.base_dir,
            &instrumentation,
            &self.journal,
            now_ms,
        )
        .map_err(|e| stage_err("build", RunExit::Orchestration)(e.to_string()))?;
        for spec in &instrumentation {
            self.records.push(TreatmentRecord {
                treatment: spec.name.clone(),
                action: spec.action.action_name().to_string(),
                phase: Phase::Instrumentation,
                service: spec.target_service().to_string(),
                params: crate::treatments::record_params(spec),
                start_ms: now_ms,
                end_ms: now_ms,
                status: TreatmentStatus::Applied,
                error: None,
            });
        }
        let compose_path = write_effective_compose(&model, &self.run_dir)
            .map_err(|e| stage_err("build", RunExit::ReportIo)(e.to_string()))?;
        self.artifacts.insert(
            "effective_compose".into(),
            compose_path
                .file_name()
                .unwrap()
                .to_string_lossy()
                .into_owned(),
        );
        self.timings
            .insert("build".into(), timer.elapsed().as_millis() as u64);
        Ok(model)
    }

    /// Sibling `topology.json` next to the compose file wins; otherwise the
    /// topology is derived from the model's depends_on edges.
    fn load_topology(&self, model: &SueModel) -> Result<SimTopology, StageFailure> {
        let fail = stage_err("build", RunExit::Orchestration);
        let compose_path = self.base_dir.join(&self.spec.sue.compose_path);
        let sibling = compose_path.parent().map(|d| d.join("topology.json"));
        let mut topology = match sibling.filter(|p| p.exists()) {
            Some(path) => {
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    stage_err("build", RunExit::Orchestration)(format!("{}: {e}", path.display()))
                })?;
                let topology = SimTopology::from_json(&text).map_err(|e| fail(e.to_string()))?;
                for service in &topology.services {
                    if !model.has_service(&service.name) {
                        return Err(stage_err("build", RunExit::Orchestration)(format!(
                            "topology service {:?} is not part of the effective model",
                            service.name
                        )));
                    }
                }
                topology
            }
            None => SimTopology::derive_from_model(model).map_err(|e| fail(e.to_string()))?,
        };
        if let Some(seed) = self.options.seed {
            topology.seed = seed;
        }
        Ok(topology)
    }

    fn execute_sim(&mut self, schedule: TreatmentSchedule) -> Result<(), StageFailure> {
        let clock: Arc<VirtualClock> = VirtualClock::starting_at(VIRTUAL_EPOCH_MS);
        let model = self.build_model(clock.now_ms())?;
        let topology = self.load_topology(&model)?;
        self.seed = topology.seed;

        let timer = Instant::now();
        let sue = Arc::new(SimSue::from_model(topology, &model, clock.now_ms()));
        let runtime = Arc::new(SimRuntime::new(
            sue.clone(),
            self.journal.clone(),
            clock.clone(),
        ));
        self.runtime = Some(runtime.clone());
        runtime
            .start(self.spec.sue.readiness_timeout.as_millis())
            .map_err(|e| stage_err("start", RunExit::Orchestration)(e.to_string()))?;
        self.timings
            .insert("start".into(), timer.elapsed().as_millis() as u64);

        let clock_dyn: Arc<dyn Clock> = clock;
        self.drive_load(
            &schedule,
            clock_dyn.clone(),
            runtime.clone() as Arc<dyn Runtime>,
            LoadDriver::Sim {
                sue: sue.clone(),
                seed: self.seed,
            },
        )?;
        let metric_backend = sue.clone();
        let trace_backend = sue;
        self.finish_run(&metric_backend, &trace_backend, clock_dyn)?;
        Ok(())
    }

    fn execute_container(&mut self, schedule: TreatmentSchedule) -> Result<(), StageFailure> {
        let clock: Arc<dyn Clock> = Arc::new(WallClock);
        let model = self.build_model(clock.now_ms())?;
        self.seed = self.options.seed.unwrap_or(0);

        let timer = Instant::now();
        let host = DockerHost::from_env();
        host.ping()
            .map_err(|e| stage_err("start", RunExit::Orchestration)(e.to_string()))?;
        let runtime = Arc::new(ContainerRuntime::new(
            host,
            model,
            &self.run_id,
            self.journal.clone(),
            clock.clone(),
        ));
        self.runtime = Some(runtime.clone());
        runtime
            .start(self.spec.sue.readiness_timeout.as_millis())
            .map_err(|e| stage_err("start", RunExit::Orchestration)(e.to_string()))?;
        self.timings
            .insert("start".into(), timer.elapsed().as_millis() as u64);

        let client = Arc::new(
            HttpTaskClient::new(&self.spec.loadgen.base_url, Duration::from_secs(10))
                .map_err(|e| stage_err("load", RunExit::Validation)(e.to_string()))?,
        );
        self.drive_load(
            &schedule,
            clock.clone(),
            runtime as Arc<dyn Runtime>,
            LoadDriver::Wall {
                client,
                seed: self.seed,
            },
        )?;

        let prometheus = std::env::var("OXN_PROMETHEUS_URL")
            .unwrap_or_else(|_| "http://localhost:9090".to_string());
        let jaeger = std::env::var("OXN_JAEGER_URL")
            .unwrap_or_else(|_| "http://localhost:16686".to_string());
        let metric_backend = HttpMetricBackend::new(&prometheus, Duration::from_secs(30))
            .map_err(|e| stage_err("collect", RunExit::ReportIo)(e.to_string()))?;
        let trace_backend = HttpTraceBackend::new(&jaeger, Duration::from_secs(30))
            .map_err(|e| stage_err("collect", RunExit::ReportIo)(e.to_string()))?;
        self.finish_run(&metric_backend, &trace_backend, clock)?;
        Ok(())
    }

    /// Tick the load and the fault schedule against the shared clock.
    fn drive_load(
        &mut self,
        schedule: &TreatmentSchedule,
        clock: Arc<dyn Clock>,
        runtime: Arc<dyn Runtime>,
        driver: LoadDriver,
    ) -> Result<(), StageFailure> {
        let timer = Instant::now();
        let profile = compile_load_profile(&self.spec.loadgen)
            .map_err(|e| stage_err("load", RunExit::Validation)(e.to_string()))?;
        let load_start_ms = clock.now_ms();
        let journal = self.journal.clone();
        journal.append(load_start_ms, JournalEvent::LoadStarted);

        let mut scheduler = FaultScheduler::new(schedule, load_start_ms, &journal);
        let mut stats = LoadStats::default();
        let ticks = profile.run_time_ms.div_ceil(1000);

        let mut sim_runner = match &driver {
            LoadDriver::Sim { seed, .. } => Some(TickLoadRunner::new(
                profile.clone(),
                &self.spec.loadgen.tasks,
                load_start_ms,
                *seed,
                self.options.think_time_ms,
            )),
            LoadDriver::Wall { .. } => None,
        };
        let mut wall_runner = match &driver {
            LoadDriver::Wall { client, seed } => Some(WallLoadRunner::new(
                profile.clone(),
                &self.spec.loadgen.tasks,
                client.clone(),
                *seed,
            )),
            LoadDriver::Sim { .. } => None,
        };

        let mut consecutive_all_failed = 0u64;
        let mut abort: Option<StageFailure> = None;
        for tick in 0..ticks {
            clock.advance_to(load_start_ms + tick * 1000);
            if let Err(e) = scheduler.on_tick(clock.now_ms(), runtime.as_ref()) {
                abort = Some(stage_err("fault-schedule", RunExit::RuntimeAbort)(
                    e.to_string(),
                ));
                break;
            }
            let bucket = match &driver {
                LoadDriver::Sim { sue, .. } => {
                    sim_runner.as_mut().expect("sim runner").tick(tick, sue)
                }
                LoadDriver::Wall { .. } => wall_runner.as_mut().expect("wall runner").tick(tick),
            };
            consecutive_all_failed =
                crate::loadgen::unreachable_streak(consecutive_all_failed, &bucket);
            stats.push_bucket(bucket);
            if consecutive_all_failed >= UNREACHABLE_ABORT_SECS {
                abort = Some(stage_err("load", RunExit::RuntimeAbort)(format!(
                    "target unreachable: all requests failed for {consecutive_all_failed} consecutive seconds"
                )));
                break;
            }
        }
        clock.advance_to(load_start_ms + profile.run_time_ms);
        scheduler.finish(clock.now_ms(), runtime.as_ref());
        if let Some(runner) = wall_runner.as_mut() {
            runner.shutdown();
        }
        journal.append(clock.now_ms(), JournalEvent::LoadFinished);

        let (records, taints) = scheduler.into_outcome();
        self.records.extend(records);
        self.taints.extend(taints);

        let csv = stats.to_csv();
        let stats_path = self.run_dir.join("loadstats.csv");
        std::fs::write(&stats_path, csv)
            .map_err(|e| stage_err("load", RunExit::ReportIo)(e.to_string()))?;
        self.artifacts
            .insert("loadstats".into(), "loadstats.csv".into());
        self.load = Some(LoadSummary {
            total_sent: stats.total_sent,
            total_successes: stats.total_successes,
            total_failures: stats.total_failures,
            stats_csv: "loadstats.csv".into(),
        });
        self.timings
            .insert("load".into(), timer.elapsed().as_millis() as u64);

        match abort {
            Some(failure) => Err(failure),
            None => Ok(()),
        }
    }

    /// Collect, label, detect and persist after the load phase.
    fn finish_run(
        &mut self,
        metric_backend: &dyn MetricBackend,
        trace_backend: &dyn TraceBackend,
        clock: Arc<dyn Clock>,
    ) -> Result<(), StageFailure> {
        let timer = Instant::now();
        let run_time_ms = self.spec.loadgen.run_time.as_millis();
        let load_end_ms = clock.now_ms();
        let load_start_ms = load_end_ms - run_time_ms;

        let fault_records: Vec<TreatmentRecord> = self
            .records
            .iter()
            .filter(|r| r.labels_rows())
            .cloned()
            .collect();

        // one frame per (response x fault); whole-run frames on baselines
        struct Plan {
            name: String,
            response: crate::config::ResponseSpec,
            window: (u64, u64),
            record: Option<TreatmentRecord>,
        }
        let mut plans = Vec::new();
        for response in &self.spec.responses {
            if fault_records.is_empty() {
                plans.push(Plan {
                    name: format!("{}__run", response.name),
                    response: response.clone(),
                    window: (load_start_ms, load_end_ms),
                    record: None,
                });
            } else {
                for record in &fault_records {
                    plans.push(Plan {
                        name: format!("{}__{}", response.name, record.treatment),
                        response: response.clone(),
                        window: (
                            record
                                .start_ms
                                .saturating_sub(response.left_window.as_millis()),
                            record.end_ms + response.right_window.as_millis(),
                        ),
                        record: Some(record.clone()),
                    });
                }
            }
        }

        let mut frames: Vec<LabeledFrame> = Vec::new();
        let mut results: Vec<DetectionResult> = Vec::new();
        for plan in &plans {
            self.journal.append(
                clock.now_ms(),
                JournalEvent::CollectStarted {
                    response: plan.name.clone(),
                },
            );
            let frame =
                collect_response(metric_backend, trace_backend, &plan.response, plan.window)
                    .map_err(|e| {
                        stage_err("collect", RunExit::ReportIo)(format!("{}: {e}", plan.name))
                    })?;
            if frame.is_empty() {
                self.empty_frames.push(plan.name.clone());
            }
            let labeled = label_frame(&plan.name, frame, &fault_records)
                .map_err(|e| stage_err("label", RunExit::ReportIo)(e.to_string()))?;

            if let Some(record) = &plan.record {
                match plan.response.kind() {
                    ResponseKind::Metric => match detect(&labeled, record, &self.spec.detection) {
                        Ok(result) => results.push(result),
                        Err(e) => self
                            .detection
                            .errors
                            .push(format!("{} / {}: {e}", plan.name, record.treatment)),
                    },
                    ResponseKind::Trace => {
                        match detect_traces(
                            &labeled,
                            record,
                            &self.spec.detection,
                            plan.response.step.as_millis(),
                            plan.window,
                        ) {
                            Ok(mut trace_results) => results.append(&mut trace_results),
                            Err(e) => self
                                .detection
                                .errors
                                .push(format!("{} / {}: {e}", plan.name, record.treatment)),
                        }
                    }
                }
            }
            frames.push(labeled);
        }
        self.timings
            .insert("collect".into(), timer.elapsed().as_millis() as u64);

        let timer = Instant::now();
        self.detection.summaries = summarize(&results);
        self.detection.results = results;
        self.timings
            .insert("detect".into(), timer.elapsed().as_millis() as u64);

        let timer = Instant::now();
        let manifest = write_store(
            &frames,
            &self.records,
            &self.run_id,
            &sha256_hex(self.text.as_bytes()),
            &self.run_dir,
        )
        .map_err(|e| stage_err("store", RunExit::ReportIo)(e.to_string()))?;
        self.artifacts
            .insert("manifest".into(), "manifest.json".into());
        self.frames = Some(manifest);
        self.timings
            .insert("store".into(), timer.elapsed().as_millis() as u64);

        if let Some(runtime) = &self.runtime {
            runtime.teardown();
        }
        Ok(())
    }
}

enum LoadDriver {
    Sim {
        sue: Arc<SimSue>,
        seed: u64,
    },
    Wall {
        client: Arc<HttpTaskClient>,
        seed: u64,
    },
}

/// Parse and validate only; the `validate` CLI surface.
pub fn validate_file(experiment_path: &Path) -> Result<ValidationReport, EngineError> {
    let text =
        std::fs::read_to_string(experiment_path).map_err(|e| EngineError::ReadExperiment {
            path: experiment_path.to_path_buf(),
            message: e.to_string(),
        })?;
    let spec = config::parse_experiment(&text)?;
    let base_dir = experiment_path.parent().unwrap_or(Path::new("."));
    Ok(config::validate::validate(&spec, base_dir))
}
