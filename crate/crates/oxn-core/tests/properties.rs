//! Property tests for the spec-level invariants: duration grammar
//! totality, config round-trip idempotence, load curve conformance,
//! labeling window membership, schedule disjointness and detector
//! monotonicity.

use std::collections::BTreeMap;

use proptest::prelude::*;

use oxn_core::config::{
    parse_experiment, to_yaml, DetectionConfig, ExperimentSpec, LoadgenSpec, Phase, ResponseQuery,
    ResponseSpec, SamplingStrategy, StageSpec, Stressor, SueSpec, TaskSpec, TreatmentAction,
    TreatmentSpec, Verb,
};
use oxn_core::detection::detect;
use oxn_core::loadgen::compile_load_profile;
use oxn_core::observation::{label_frame, Frame, MetricRow, TimeSeriesFrame, NO_TREATMENT};
use oxn_core::time::{parse_duration, DurationSpec};
use oxn_core::treatments::{plan_schedule, TreatmentRecord, TreatmentStatus};

// --- duration grammar ----------------------------------------------------

proptest! {
    #[test]
    fn duration_grammar_is_total(value in 0u64..10_000_000, unit in prop::sample::select(vec!["ms", "s", "m", "h", ""])) {
        let text = format!("{value}{unit}");
        let parsed = parse_duration(&text).expect("grammar strings parse");
        let factor = match unit { "ms" => 1, "m" => 60_000, "h" => 3_600_000, _ => 1000 };
        prop_assert_eq!(parsed.as_millis(), value * factor);
    }

    #[test]
    fn duration_rejects_off_grammar_strings(text in "\\PC*") {
        let on_grammar = {
            let digits = text.bytes().take_while(|b| b.is_ascii_digit()).count();
            digits > 0
                && matches!(&text[digits..], "" | "ms" | "s" | "m" | "h")
                && text[..digits].parse::<u64>().is_ok()
        };
        // never panics; errs exactly off the grammar (modulo overflow)
        match parse_duration(&text) {
            Ok(_) => prop_assert!(on_grammar, "accepted {text:?}"),
            Err(_) => {
                if on_grammar {
                    // only overflow may reject an on-grammar string
                    let v: u64 = text.trim_end_matches(|c: char| c.is_ascii_alphabetic()).parse().unwrap();
                    prop_assert!(v.checked_mul(3_600_000).is_none(), "rejected {text:?}");
                }
            }
        }
    }
}

// --- config round trip ---------------------------------------------------

fn name() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,9}"
}

fn duration(max_s: u64) -> impl Strategy<Value = DurationSpec> {
    (0..=max_s).prop_map(DurationSpec::from_secs)
}

fn response() -> impl Strategy<Value = (ResponseQuery, DurationSpec)> {
    let metric = ("[a-z_]{3,20}", 1u64..5).prop_map(|(expr, step)| {
        (
            ResponseQuery::Metric { expr },
            DurationSpec::from_secs(step),
        )
    });
    let trace = ("[a-z-]{3,12}", prop::option::of("[A-Z]{2,6}"), 1u64..5).prop_map(
        |(service, operation, step)| {
            (
                ResponseQuery::Trace { service, operation },
                DurationSpec::from_secs(step),
            )
        },
    );
    prop_oneof![metric, trace]
}

fn action() -> impl Strategy<Value = TreatmentAction> {
    let service = "[a-z-]{3,12}";
    prop_oneof![
        (service, 1u64..600).prop_map(|(service, d)| TreatmentAction::Pause {
            service,
            duration: DurationSpec::from_secs(d)
        }),
        (service, 1u64..600).prop_map(|(service, d)| TreatmentAction::Kill {
            service,
            duration: DurationSpec::from_secs(d)
        }),
        (service, 1u64..600, 0u64..5000, 0u64..500).prop_map(|(service, d, delay, jitter)| {
            TreatmentAction::NetworkDelay {
                service,
                interface: "eth0".into(),
                duration: DurationSpec::from_secs(d),
                delay_ms: delay,
                jitter_ms: jitter,
            }
        }),
        (service, 1u64..600, 0u8..=100).prop_map(|(service, d, p)| TreatmentAction::PacketLoss {
            service,
            interface: "eth0".into(),
            duration: DurationSpec::from_secs(d),
            loss_percentage: p,
        }),
        (service, 1u64..600, 0u8..=100).prop_map(|(service, d, p)| {
            TreatmentAction::PacketCorruption {
                service,
                interface: "eth0".into(),
                duration: DurationSpec::from_secs(d),
                corrupt_percentage: p,
            }
        }),
        (service, 1u64..600, 1u32..8, 1u8..=100).prop_map(|(service, d, workers, load)| {
            TreatmentAction::Stress {
                service,
                duration: DurationSpec::from_secs(d),
                stressor: Stressor::Cpu,
                workers,
                load_percent: load,
            }
        }),
        (service, 1u64..60_000).prop_map(|(service, ms)| TreatmentAction::MetricSamplingRate {
            service,
            export_interval: DurationSpec::from_millis(ms),
        }),
        (service, 0u32..=100).prop_map(|(service, r)| TreatmentAction::TracingSamplingRate {
            service,
            rate: r as f64 / 100.0,
        }),
        (service, 0u32..=100, 0usize..3).prop_map(|(service, r, which)| {
            let strategy = match which {
                0 => SamplingStrategy::Always,
                1 => SamplingStrategy::Never,
                _ => SamplingStrategy::Probabilistic {
                    rate: r as f64 / 100.0,
                },
            };
            TreatmentAction::TracingSamplingStrategy { service, strategy }
        }),
    ]
}

prop_compose! {
    fn experiment_spec()(
        response_names in prop::collection::btree_set(name(), 1..4),
        treatment_names in prop::collection::btree_set(name(), 0..4),
        response_bodies in prop::collection::vec((response(), duration(300), duration(300)), 4),
        actions in prop::collection::vec(action(), 4),
        exclude in prop::collection::vec("[a-z-]{3,10}", 0..3),
        readiness in duration(600),
        run_time_s in 60u64..3600,
        stages in prop::collection::vec((1u64..400, 0u32..100, prop::sample::select(vec![0.5f64, 1.0, 2.0, 2.5, 5.0, 10.0, 25.0])), 0..3),
        weights in prop::collection::vec(1u32..9, 1..3),
        z in 1u32..100,
        k in 1u32..10,
    ) -> ExperimentSpec {
        let responses: Vec<ResponseSpec> = response_names
            .iter()
            .zip(&response_bodies)
            .map(|(name, ((query, step), left, right))| ResponseSpec {
                name: name.clone(),
                query: query.clone(),
                left_window: *left,
                right_window: *right,
                step: *step,
            })
            .collect();
        let treatments: Vec<TreatmentSpec> = treatment_names
            .iter()
            .zip(&actions)
            .map(|(name, action)| TreatmentSpec { name: name.clone(), action: action.clone() })
            .collect();
        // stage durations must fit inside run_time
        let mut remaining = run_time_s;
        let stages: Vec<StageSpec> = stages
            .into_iter()
            .filter_map(|(d, users, rate)| {
                let d = d.min(remaining);
                if d == 0 {
                    return None;
                }
                remaining -= d;
                Some(StageSpec { duration: DurationSpec::from_secs(d), users, spawn_rate: rate })
            })
            .collect();
        let tasks: Vec<TaskSpec> = weights
            .into_iter()
            .enumerate()
            .map(|(i, weight)| TaskSpec {
                endpoint: format!("/endpoint{i}"),
                verb: if i % 2 == 0 { Verb::Get } else { Verb::Post },
                params: BTreeMap::new(),
                weight,
            })
            .collect();
        let baseline = treatments.is_empty();
        ExperimentSpec {
            responses,
            treatments,
            sue: SueSpec {
                compose_path: "compose.yml".into(),
                exclude,
                include: None,
                readiness_timeout: readiness,
            },
            loadgen: LoadgenSpec {
                run_time: DurationSpec::from_secs(run_time_s),
                base_url: "http://localhost:8080".into(),
                stages,
                tasks,
            },
            baseline,
            detection: DetectionConfig { z: z as f64 / 10.0, k: k as usize },
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn serialize_parse_round_trip(spec in experiment_spec()) {
        let rendered = to_yaml(&spec);
        let reparsed = parse_experiment(&rendered)
            .map_err(|e| TestCaseError::fail(format!("{e}\n---\n{rendered}")))?;
        prop_assert_eq!(&reparsed, &spec);
        // canonical form is a fixed point
        prop_assert_eq!(to_yaml(&reparsed), rendered);
    }

    #[test]
    fn schedule_windows_are_disjoint_and_gapped(spec in experiment_spec()) {
        match plan_schedule(&spec) {
            Err(_) => {} // overflow is a legitimate outcome for random specs
            Ok(schedule) => {
                let max_left = spec.responses.iter().map(|r| r.left_window.as_millis()).max().unwrap_or(0);
                let max_right = spec.responses.iter().map(|r| r.right_window.as_millis()).max().unwrap_or(0);
                prop_assert_eq!(schedule.warmup_ms, max_left);
                if let Some(first) = schedule.entries.first() {
                    prop_assert!(first.offset_ms >= max_left);
                }
                for pair in schedule.entries.windows(2) {
                    let end = pair[0].offset_ms + pair[0].duration_ms;
                    prop_assert!(end < pair[1].offset_ms, "windows touch");
                    prop_assert!(pair[1].offset_ms - end >= max_left.max(max_right).max(1000));
                }
                if !schedule.entries.is_empty() {
                    prop_assert!(schedule.required_run_time_ms <= spec.loadgen.run_time.as_millis());
                }
                // determinism
                prop_assert_eq!(plan_schedule(&spec).unwrap(), schedule);
            }
        }
    }
}

// --- load curve ----------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn users_at_matches_the_spawn_loop(
        stages in prop::collection::vec(
            (10u64..200, 0u32..60, prop::sample::select(vec![0.5f64, 1.0, 2.0, 2.5, 5.0, 10.0, 25.0])),
            1..4
        ),
    ) {
        let total: u64 = stages.iter().map(|(d, _, _)| d).sum();
        // only feasible ramps compile
        let mut prev = 0u32;
        for (d, users, rate) in &stages {
            let ramp_s = (users.abs_diff(prev) as f64 / rate).ceil() as u64;
            prop_assume!(ramp_s <= *d);
            prev = *users;
        }
        let spec = LoadgenSpec {
            run_time: DurationSpec::from_secs(total),
            base_url: "http://localhost:1".into(),
            stages: stages
                .iter()
                .map(|&(d, users, rate)| StageSpec {
                    duration: DurationSpec::from_secs(d),
                    users,
                    spawn_rate: rate,
                })
                .collect(),
            tasks: vec![TaskSpec {
                endpoint: "/".into(),
                verb: Verb::Get,
                params: BTreeMap::new(),
                weight: 1,
            }],
        };
        let profile = compile_load_profile(&spec).unwrap();

        // independent oracle: replay discrete spawn events
        let mut events: Vec<(f64, u32)> = Vec::new();
        let mut count = 0u32;
        let mut cursor = 0.0f64;
        for (d, target, rate) in &stages {
            let interval = 1000.0 / rate;
            let mut event_t = cursor;
            while count != *target {
                event_t += interval;
                count = if *target > count { count + 1 } else { count - 1 };
                events.push((event_t, count));
            }
            cursor += (*d * 1000) as f64;
        }
        for t_s in 0..total {
            let t_ms = t_s * 1000;
            let mut expected = 0;
            for (event_t, new_count) in &events {
                if *event_t <= t_ms as f64 {
                    expected = *new_count;
                } else {
                    break;
                }
            }
            prop_assert_eq!(profile.users_at(t_ms).unwrap(), expected, "t={}s", t_s);
        }
    }
}

// --- labeling ------------------------------------------------------------

fn fault_record(name: &str, start_ms: u64, end_ms: u64) -> TreatmentRecord {
    TreatmentRecord {
        treatment: name.to_string(),
        action: "loss".into(),
        phase: Phase::Fault,
        service: "svc".into(),
        params: BTreeMap::new(),
        start_ms,
        end_ms,
        status: TreatmentStatus::Reverted,
        error: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn labels_equal_window_membership(
        offsets in prop::collection::vec(1u64..50, 2..5),
        row_times in prop::collection::vec(0u64..400_000, 1..200),
    ) {
        // build strictly disjoint windows from cumulative offsets
        let mut records = Vec::new();
        let mut cursor = 0u64;
        for (i, gap) in offsets.iter().enumerate() {
            let start = cursor + gap * 1000;
            let end = start + 20_000;
            records.push(fault_record(&format!("f{i}"), start, end));
            cursor = end + 1000;
        }
        let frame = Frame::Metric(TimeSeriesFrame {
            response: "r".into(),
            query: "q".into(),
            step_ms: 1000,
            rows: {
                let mut ts = row_times.clone();
                ts.sort_unstable();
                ts.dedup();
                ts.iter().map(|&t_ms| MetricRow { t_ms, value: 0.0 }).collect()
            },
        });
        let labeled = label_frame("f", frame.clone(), &records).unwrap();
        for row in 0..labeled.len() {
            let anchor = labeled.frame.anchor_ms(row);
            let matching: Vec<&TreatmentRecord> = records
                .iter()
                .filter(|r| anchor >= r.start_ms && anchor <= r.end_ms)
                .collect();
            match matching.as_slice() {
                [] => prop_assert_eq!(labeled.label_of(row), NO_TREATMENT),
                [record] => prop_assert_eq!(labeled.label_of(row), record.treatment.as_str()),
                _ => prop_assert!(false, "windows overlap"),
            }
        }

        // permutation invariance
        let mut reversed = records.clone();
        reversed.reverse();
        let relabeled = label_frame("f", frame, &reversed).unwrap();
        let a: Vec<&str> = labeled.labels().collect();
        let b: Vec<&str> = relabeled.labels().collect();
        prop_assert_eq!(a, b);
    }
}

// --- detector ------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raising_z_is_monotone(
        seed in 0u64..10_000,
        shift in 0u32..80,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut values: Vec<f64> = (0..60).map(|_| 100.0 + rng.gen_range(-5.0..5.0)).collect();
        values.extend((0..30).map(|_| 100.0 + shift as f64 / 10.0 + rng.gen_range(-5.0..5.0)));
        let rows: Vec<MetricRow> = values
            .iter()
            .enumerate()
            .map(|(i, &value)| MetricRow { t_ms: i as u64 * 1000, value })
            .collect();
        let record = fault_record("fault", 60_000, 89_000);
        let frame = label_frame(
            "f",
            Frame::Metric(TimeSeriesFrame {
                response: "r".into(),
                query: "q".into(),
                step_ms: 1000,
                rows,
            }),
            std::slice::from_ref(&record),
        )
        .unwrap();

        let mut was_detected = true;
        for z in [0.5, 1.0, 2.0, 3.0, 5.0, 8.0] {
            let result = detect(&frame, &record, &DetectionConfig { z, k: 3 }).unwrap();
            prop_assert!(was_detected || !result.detected, "z={} re-detected", z);
            was_detected = result.detected;
        }
    }
}
