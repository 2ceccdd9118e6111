//! End-to-end engine runs on the simulated backend covering the treatment
//! library beyond the reference packet-loss scenario, abort paths and
//! partial reports.

use std::path::{Path, PathBuf};

use oxn_core::config::Phase;
use oxn_core::engine::{run_experiment, BackendChoice, RunExit, RunOptions};
use oxn_core::observation::read_frame;
use oxn_core::report::{ExperimentReport, RunStatus};
use oxn_core::treatments::TreatmentStatus;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap()
}

/// Write an experiment (plus the sue fixtures) into a tempdir.
fn stage(dir: &Path, text: &str) -> PathBuf {
    std::fs::create_dir_all(dir.join("sue")).unwrap();
    for fixture in ["docker-compose.yml", "topology.json"] {
        std::fs::copy(
            repo_root().join("sue").join(fixture),
            dir.join("sue").join(fixture),
        )
        .unwrap();
    }
    let path = dir.join("experiment.yml");
    std::fs::write(&path, text.replace("../sue/", "sue/")).unwrap();
    path
}

fn sim_run(path: &Path, out: &Path, seed: u64) -> (ExperimentReport, PathBuf, RunExit) {
    let outcome = run_experiment(
        path,
        &RunOptions {
            backend: BackendChoice::Sim,
            seed: Some(seed),
            out_root: out.to_path_buf(),
            think_time_ms: 0,
        },
    )
    .expect("run starts");
    (outcome.report, outcome.run_dir, outcome.exit)
}

fn experiment(treatments: &str, run_time: &str, stages: &str, windows: &str) -> String {
    format!(
        r#"
experiment:
  responses:
    - recommendations_per_min:
        type: metric
        metric_name: increase(app_recommendations_counter_total[1m])
        left_window: {windows}
        right_window: {windows}
        step: 1
  treatments:
{treatments}
  sue:
    compose: ../sue/docker-compose.yml
    exclude: [loadgenerator]
  loadgen:
    run_time: {run_time}
    base_url: http://localhost:8080
    stages:
    - {stages}
    tasks:
    - {{ endpoint: /, verb: get, params: {{ }} }}
"#
    )
}

#[test]
fn pause_suspends_and_recovers() {
    // pause is kept shorter than the 10s unreachable abort
    let text = experiment(
        r#"    - short_pause:
        action: pause
        params: {
          service_name: recommendation-service,
          duration: 8s,
        }"#,
        "4m",
        "{duration: 240, users: 20, spawn_rate: 20}",
        "90s",
    );
    let dir = tempfile::tempdir().unwrap();
    let path = stage(dir.path(), &text);
    let (report, run_dir, exit) = sim_run(&path, &dir.path().join("runs"), 3);
    assert_eq!(exit, RunExit::Success);

    let fault = report
        .treatments
        .iter()
        .find(|t| t.phase == Phase::Fault)
        .unwrap();
    assert_eq!(fault.status, TreatmentStatus::Reverted);
    assert_eq!(fault.end_ms - fault.start_ms, 8_000);

    // the journal shows pause and unpause paired
    let journal = std::fs::read_to_string(run_dir.join("journal.ndjson")).unwrap();
    assert!(journal.contains("service_paused"));
    assert!(journal.contains("service_unpaused"));

    // unresponsive during [start, end]: in-window requests fail, traffic
    // recovers once reverted
    let csv = std::fs::read_to_string(run_dir.join("loadstats.csv")).unwrap();
    let mut in_window_failures = 0u64;
    let mut tail_failures = 0u64;
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let t: u64 = fields[0].parse().unwrap();
        let failures: u64 = fields[4].parse().unwrap();
        if (90..98).contains(&t) {
            in_window_failures += failures;
        } else if t >= 105 {
            tail_failures += failures;
        }
    }
    assert!(
        in_window_failures > 0,
        "paused service did not fail requests"
    );
    assert_eq!(tail_failures, 0, "failures persist after the revert");
}

#[test]
fn kill_is_terminal_and_skips_later_treatments_on_the_target() {
    let text = experiment(
        r#"    - kill_datastore:
        action: kill
        params: {
          service_name: datastore,
          duration: 30s,
        }
    - pause_datastore_later:
        action: pause
        params: {
          service_name: datastore,
          duration: 10s,
        }"#,
        "10m",
        "{duration: 600, users: 5, spawn_rate: 5}",
        "60s",
    );
    let dir = tempfile::tempdir().unwrap();
    let path = stage(dir.path(), &text);
    let (report, run_dir, exit) = sim_run(&path, &dir.path().join("runs"), 4);
    // the run aborts: killing the datastore makes every request fail until
    // the 10-consecutive-seconds unreachable rule trips
    assert_eq!(exit, RunExit::RuntimeAbort);
    assert_eq!(report.status, RunStatus::Failed);
    assert_eq!(report.failure.as_ref().unwrap().stage, "load");

    let kill = report
        .treatments
        .iter()
        .find(|t| t.treatment == "kill_datastore")
        .unwrap();
    assert_eq!(kill.status, TreatmentStatus::Applied, "kill has no revert");
    let journal = std::fs::read_to_string(run_dir.join("journal.ndjson")).unwrap();
    assert!(journal.contains("service_killed"));
    // partial report exists and is readable
    let reread = ExperimentReport::read(&run_dir).unwrap();
    assert_eq!(reread.status, RunStatus::Failed);
}

#[test]
fn kill_off_critical_path_lets_the_run_finish() {
    // a topology where the killed service is not on the request path:
    // gateway -> recommendation-service -> datastore, kill loadhelper
    let compose = r#"
services:
  gateway:
    image: x/gateway
    ports: ["8080:8080"]
    depends_on: [recommendation-service]
  recommendation-service:
    image: x/rec
    depends_on: [datastore]
  datastore:
    image: x/db
  loadhelper:
    image: x/helper
  loadgenerator:
    image: x/load
"#;
    let topology = r#"
{
  "services": [
    {"name": "gateway", "base_latency_ms": 20.0, "downstream": ["recommendation-service"]},
    {"name": "recommendation-service", "base_latency_ms": 30.0, "downstream": ["datastore"],
     "counter": "app_recommendations_counter_total"},
    {"name": "datastore", "base_latency_ms": 10.0, "downstream": []},
    {"name": "loadhelper", "base_latency_ms": 5.0, "downstream": []}
  ],
  "entry": "gateway",
  "seed": 0
}
"#;
    let text = experiment(
        r#"    - kill_helper:
        action: kill
        params: {
          service_name: loadhelper,
          duration: 30s,
        }
    - pause_helper_again:
        action: pause
        params: {
          service_name: loadhelper,
          duration: 10s,
        }"#,
        "10m",
        "{duration: 600, users: 5, spawn_rate: 5}",
        "60s",
    );
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("sue")).unwrap();
    std::fs::write(dir.path().join("sue/docker-compose.yml"), compose).unwrap();
    std::fs::write(dir.path().join("sue/topology.json"), topology).unwrap();
    let path = dir.path().join("experiment.yml");
    std::fs::write(&path, text.replace("../sue/", "sue/")).unwrap();

    let (report, _run_dir, exit) = sim_run(&path, &dir.path().join("runs"), 4);
    assert_eq!(exit, RunExit::Success);

    let kill = report
        .treatments
        .iter()
        .find(|t| t.treatment == "kill_helper")
        .unwrap();
    assert_eq!(kill.status, TreatmentStatus::Applied);
    // the later treatment on the killed target was skipped, not attempted
    let skipped = report
        .treatments
        .iter()
        .find(|t| t.treatment == "pause_helper_again")
        .unwrap();
    assert_eq!(skipped.status, TreatmentStatus::Skipped);
    assert!(skipped.error.as_ref().unwrap().contains("killed"));
}

#[test]
fn stress_raises_in_window_latency() {
    let text = experiment(
        r#"    - cpu_pressure:
        action: stress
        params: {
          service_name: recommendation-service,
          duration: 60s,
          stressor: cpu,
          workers: 2,
          load_percent: 100,
        }"#,
        "4m",
        "{duration: 240, users: 10, spawn_rate: 10}",
        "60s",
    );
    let dir = tempfile::tempdir().unwrap();
    let path = stage(dir.path(), &text);
    let (report, run_dir, exit) = sim_run(&path, &dir.path().join("runs"), 6);
    assert_eq!(exit, RunExit::Success);
    let fault = report
        .treatments
        .iter()
        .find(|t| t.phase == Phase::Fault)
        .unwrap();
    assert_eq!(fault.status, TreatmentStatus::Reverted);

    // p50 latency roughly triples at the stressed hop (factor 1 + 2*1.0)
    let csv = std::fs::read_to_string(run_dir.join("loadstats.csv")).unwrap();
    let p50_at = |lo: u64, hi: u64| -> f64 {
        let mut values: Vec<f64> = csv
            .lines()
            .skip(1)
            .filter_map(|line| {
                let fields: Vec<&str> = line.split(',').collect();
                let t: u64 = fields[0].parse().ok()?;
                let sent: u64 = fields[2].parse().ok()?;
                (t >= lo && t < hi && sent > 0)
                    .then(|| fields[5].parse().ok())
                    .flatten()
            })
            .collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values[values.len() / 2]
    };
    let baseline = p50_at(5, 55);
    let stressed = p50_at(62, 118);
    // stressed hop contributes 50ms -> 150ms of the ~100ms total
    assert!(
        stressed - baseline > 60.0,
        "stress shifted p50 by only {:.1}ms ({baseline:.1} -> {stressed:.1})",
        stressed - baseline
    );
}

#[test]
fn corruption_shows_up_as_errors_at_the_configured_rate() {
    let text = experiment(
        r#"    - corrupt_some:
        action: corrupt
        params: {
          service_name: recommendation-service,
          duration: 120s,
          corrupt_percentage: 20,
          interface: eth0,
        }"#,
        "6m",
        "{duration: 360, users: 20, spawn_rate: 20}",
        "60s",
    );
    let dir = tempfile::tempdir().unwrap();
    let path = stage(dir.path(), &text);
    let (report, run_dir, exit) = sim_run(&path, &dir.path().join("runs"), 8);
    assert_eq!(exit, RunExit::Success);

    let fault = report
        .treatments
        .iter()
        .find(|t| t.phase == Phase::Fault)
        .unwrap();
    let csv = std::fs::read_to_string(run_dir.join("loadstats.csv")).unwrap();
    let journal = std::fs::read_to_string(run_dir.join("journal.ndjson")).unwrap();
    let load_start: u64 = oxn_core::orchestrator::journal::read_journal(&journal)
        .unwrap()
        .iter()
        .find(|e| {
            matches!(
                e.event,
                oxn_core::orchestrator::journal::JournalEvent::LoadStarted
            )
        })
        .unwrap()
        .t_ms;
    let w0 = (fault.start_ms - load_start) / 1000;
    let w1 = (fault.end_ms - load_start) / 1000;
    let mut sent = 0u64;
    let mut failed = 0u64;
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let t: u64 = fields[0].parse().unwrap();
        if t >= w0 && t < w1 {
            sent += fields[2].parse::<u64>().unwrap();
            failed += fields[4].parse::<u64>().unwrap();
        }
    }
    assert!(sent >= 1000);
    let ratio = failed as f64 / sent as f64;
    assert!(
        (ratio - 0.20).abs() <= 0.05,
        "corrupt 20% gave failure ratio {ratio:.4}"
    );
}

#[test]
fn zero_magnitude_delay_changes_nothing_statistically() {
    let text = experiment(
        r#"    - zero_delay:
        action: delay
        params: {
          service_name: recommendation-service,
          duration: 60s,
          delay_ms: 0,
          interface: eth0,
        }"#,
        "4m",
        "{duration: 240, users: 10, spawn_rate: 10}",
        "60s",
    );
    let dir = tempfile::tempdir().unwrap();
    let path = stage(dir.path(), &text);
    let (report, _run_dir, exit) = sim_run(&path, &dir.path().join("runs"), 9);
    assert_eq!(exit, RunExit::Success);
    let fault = report
        .treatments
        .iter()
        .find(|t| t.phase == Phase::Fault)
        .unwrap();
    assert_eq!(fault.status, TreatmentStatus::Reverted);
    // statistically identical to baseline: the detector stays quiet
    let summary = &report.detection.summaries[0];
    assert!(
        !summary.detected,
        "zero-magnitude fault was detected: {summary:?}"
    );
}

#[test]
fn trace_responses_flow_through_detection() {
    let text = r#"
experiment:
  responses:
    - gateway_spans:
        type: trace
        service_name: gateway
        left_window: 60s
        right_window: 60s
  treatments:
    - drop_half:
        action: loss
        params: {
          service_name: gateway,
          duration: 60s,
          loss_percentage: 90,
          interface: eth0,
        }
  sue:
    compose: ../sue/docker-compose.yml
    exclude: [loadgenerator]
  loadgen:
    run_time: 4m
    base_url: http://localhost:8080
    stages:
    - {duration: 240, users: 10, spawn_rate: 10}
    tasks:
    - { endpoint: /, verb: get, params: { } }
"#;
    let dir = tempfile::tempdir().unwrap();
    let path = stage(dir.path(), text);
    let (report, run_dir, exit) = sim_run(&path, &dir.path().join("runs"), 10);
    assert_eq!(exit, RunExit::Success);

    // two derived series per trace response
    assert_eq!(report.detection.results.len(), 2);
    assert!(report
        .detection
        .results
        .iter()
        .any(|r| r.response.ends_with("span_count")));
    let summary = &report.detection.summaries[0];
    assert!(summary.detected, "90% loss should collapse the span count");

    // the trace frame on disk has spans with labels
    let manifest = report.frames.as_ref().unwrap();
    let entry = &manifest.frames[0];
    assert_eq!(entry.kind, "trace");
    let frame = read_frame(&run_dir.join(&entry.path), &entry.name).unwrap();
    assert!(!frame.is_empty());
}

#[test]
fn pausing_the_entry_aborts_as_unreachable() {
    let text = experiment(
        r#"    - long_gateway_pause:
        action: pause
        params: {
          service_name: gateway,
          duration: 60s,
        }"#,
        "4m",
        "{duration: 240, users: 10, spawn_rate: 10}",
        "30s",
    );
    let dir = tempfile::tempdir().unwrap();
    let path = stage(dir.path(), &text);
    let (report, _run_dir, exit) = sim_run(&path, &dir.path().join("runs"), 12);
    assert_eq!(exit, RunExit::RuntimeAbort);
    assert_eq!(report.failure.as_ref().unwrap().stage, "load");
    assert!(report
        .failure
        .as_ref()
        .unwrap()
        .message
        .contains("unreachable"));
}

#[test]
fn container_backend_with_dead_daemon_exits_orchestration() {
    let text = experiment(
        r#"    - some_loss:
        action: loss
        params: {
          service_name: recommendation-service,
          duration: 30s,
          loss_percentage: 10,
          interface: eth0,
        }"#,
        "2m",
        "{duration: 120, users: 2, spawn_rate: 2}",
        "30s",
    );
    let dir = tempfile::tempdir().unwrap();
    let path = stage(dir.path(), &text);

    // point the engine at a daemon socket that cannot exist
    std::env::set_var("DOCKER_HOST", "unix:///nonexistent/oxn-test.sock");
    let outcome = run_experiment(
        &path,
        &RunOptions {
            backend: BackendChoice::Container,
            seed: Some(1),
            out_root: dir.path().join("runs"),
            think_time_ms: 0,
        },
    )
    .expect("run starts");
    std::env::remove_var("DOCKER_HOST");

    assert_eq!(outcome.exit, RunExit::Orchestration);
    assert_eq!(outcome.report.status, RunStatus::Failed);
    let failure = outcome.report.failure.as_ref().unwrap();
    assert_eq!(failure.stage, "start");
    // partial report is on disk and names the step
    let reread = ExperimentReport::read(&outcome.run_dir).unwrap();
    assert_eq!(reread.failure.as_ref().unwrap().stage, "start");
}

#[test]
fn the_users_compose_file_is_never_mutated() {
    let text = experiment(
        r#"    - tweak_interval:
        action: otel_metrics_interval
        params: {
          service_name: recommendation-service,
          export_interval_ms: 2000,
        }"#,
        "1m",
        "{duration: 60, users: 2, spawn_rate: 2}",
        "10s",
    );
    let dir = tempfile::tempdir().unwrap();
    let path = stage(dir.path(), &text);
    let compose_path = dir.path().join("sue/docker-compose.yml");
    let before = std::fs::read(&compose_path).unwrap();

    let (report, run_dir, exit) = sim_run(&path, &dir.path().join("runs"), 2);
    assert_eq!(exit, RunExit::Success);

    let after = std::fs::read(&compose_path).unwrap();
    assert_eq!(
        before, after,
        "instrumentation patched the source compose file"
    );
    // the patch landed in the rendered effective compose instead
    let effective = std::fs::read_to_string(run_dir.join("effective-compose.yml")).unwrap();
    assert!(effective.contains("OTEL_METRIC_EXPORT_INTERVAL"));
    assert!(report
        .treatments
        .iter()
        .any(|t| t.phase == Phase::Instrumentation));
}

#[test]
fn multi_fault_runs_stay_sequential() {
    let text = experiment(
        r#"    - first_loss:
        action: loss
        params: {
          service_name: recommendation-service,
          duration: 30s,
          loss_percentage: 50,
          interface: eth0,
        }
    - then_delay:
        action: delay
        params: {
          service_name: recommendation-service,
          duration: 30s,
          delay_ms: 150,
          interface: eth0,
        }"#,
        "6m",
        "{duration: 360, users: 10, spawn_rate: 10}",
        "45s",
    );
    let dir = tempfile::tempdir().unwrap();
    let path = stage(dir.path(), &text);
    let (report, _run_dir, exit) = sim_run(&path, &dir.path().join("runs"), 15);
    assert_eq!(exit, RunExit::Success);

    let faults: Vec<_> = report
        .treatments
        .iter()
        .filter(|t| t.phase == Phase::Fault)
        .collect();
    assert_eq!(faults.len(), 2);
    assert!(
        faults[0].end_ms < faults[1].start_ms,
        "fault windows overlap"
    );
    assert!(faults.iter().all(|f| f.status == TreatmentStatus::Reverted));
    // both faults produce their own frame
    assert_eq!(report.frames.as_ref().unwrap().frames.len(), 2);
}

#[test]
fn never_sampling_yields_an_empty_flagged_trace_frame() {
    let text = r#"
experiment:
  responses:
    - gateway_spans:
        type: trace
        service_name: gateway
        left_window: 20s
        right_window: 20s
  treatments:
    - mute_tracing:
        action: otel_traces_sampling_strategy
        params: {
          service_name: gateway,
          strategy: never,
        }
  sue:
    compose: ../sue/docker-compose.yml
    exclude: [loadgenerator]
  loadgen:
    run_time: 1m
    base_url: http://localhost:8080
    stages:
    - {duration: 60, users: 5, spawn_rate: 5}
    tasks:
    - { endpoint: /, verb: get, params: { } }
"#;
    let dir = tempfile::tempdir().unwrap();
    let path = stage(dir.path(), text);
    let (report, _run_dir, exit) = sim_run(&path, &dir.path().join("runs"), 30);
    assert_eq!(exit, RunExit::Success);

    // the instrumentation silenced every span: the frame exists, has zero
    // rows, and the report flags it
    let manifest = report.frames.as_ref().unwrap();
    assert_eq!(manifest.frames[0].rows, 0);
    assert_eq!(report.empty_frames, vec![manifest.frames[0].name.clone()]);
    // requests were still served and counted
    assert!(report.load.as_ref().unwrap().total_sent > 0);
}
