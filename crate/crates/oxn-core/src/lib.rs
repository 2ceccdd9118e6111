//! Observability experiment engine.
//!
//! Runs systematic, repeatable observability experiments against
//! microservice applications: deploy a system under experiment, alter its
//! observability configuration, inject faults under controlled load, and
//! measure whether the faults are visible in the collected telemetry.

pub mod compose;
pub mod config;
pub mod detection;
pub mod engine;
pub mod loadgen;
pub mod minihttp;
pub mod observation;
pub mod orchestrator;
pub mod report;
pub mod sim;
pub mod time;
pub mod treatments;

pub use config::{
    DetectionConfig, ExperimentSpec, LoadgenSpec, ParseError, Phase, ResponseKind, ResponseQuery,
    ResponseSpec, StageSpec, SueSpec, TaskSpec, TreatmentAction, TreatmentSpec, ValidationReport,
    Verb, Violation, ViolationCode,
};
pub use detection::{
    detect, summarize, DetectionResult, Detector, ThresholdDetector, TreatmentSummary,
};
pub use engine::{
    run_experiment, validate_file, BackendChoice, EngineError, RunExit, RunOptions, RunOutcome,
};
pub use observation::{
    label_frame, Frame, LabeledFrame, TimeSeriesFrame, TraceFrame, NO_TREATMENT,
};
pub use orchestrator::journal::{Journal, JournalEntry, JournalEvent};
pub use orchestrator::runtime::{BackendKind, RuntimeApi, ServiceState};
pub use orchestrator::{OrchestratorError, Runtime, SueModel};
pub use report::ExperimentReport;
pub use time::{parse_duration, Clock, DurationSpec, VirtualClock, WallClock};
pub use treatments::{
    plan_schedule, FaultScheduler, Treatment, TreatmentError, TreatmentRecord, TreatmentSchedule,
    TreatmentStatus,
};

/// Engine version stamped into reports and manifests.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
