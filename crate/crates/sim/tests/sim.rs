use std::collections::BTreeSet;
use std::process::Command;

use notigate_core::config::PolicyMode;
use notigate_core::model::{DurationKind, Severity};
use notigate_sim::runner::{run, RunOptions};
use notigate_sim::users::{Schedule, SyntheticUser};
use notigate_sim::workload::{SourceSpec, Workload};
use notigate_sim::Scenario;
use proptest::prelude::*;

fn data(name: &str) -> String {
    format!("{}/data/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn scenario(name: &str) -> Scenario {
    serde_json::from_str(&std::fs::read_to_string(data(name)).unwrap()).unwrap()
}

fn office(id: &str) -> SyntheticUser {
    let mut u = SyntheticUser::new(id, BTreeSet::new());
    u.active_hours = Some(Schedule {
        days: vec![0, 1, 2, 3, 4],
        from_hour: 9,
        to_hour: 18,
    });
    u
}

fn mixed_workload(seed: u64, days: f64) -> Workload {
    Workload {
        sources: vec![
            SourceSpec {
                source_id: "ci".into(),
                event_type: "build.failed".into(),
                poisson_rate: 3.0,
                severity_mix: [(Severity::Warning, 0.6), (Severity::Error, 0.4)].into_iter().collect(),
                critical_prob: 0.1,
                urgency: 0.6,
                duration: DurationKind::OneShot,
            },
            SourceSpec {
                source_id: "mon".into(),
                event_type: "disk.usage".into(),
                poisson_rate: 2.0,
                severity_mix: [(Severity::Info, 1.0)].into_iter().collect(),
                critical_prob: 0.0,
                urgency: 0.3,
                duration: DurationKind::Repeated,
            },
        ],
        duration: days,
        seed,
    }
}

#[test]
fn empty_workload_gives_zero_metrics() {
    let out = run(&Workload::empty(1), &[], None, &RunOptions::default()).unwrap();
    let r = &out.report;
    assert_eq!((r.events, r.alerts, r.notifications, r.sends), (0, 0, 0, 0));
    assert_eq!(r.missed_critical_rate, 0.0);
    assert_eq!(r.interruptions_per_user_day, 0.0);
    assert!(r.passed && r.conservation.holds);
}

#[test]
fn same_inputs_same_bytes() {
    let users = [office("a"), office("b")];
    let o = RunOptions {
        mode: PolicyMode::Learned,
        seed: 9,
        ..RunOptions::default()
    };
    let x = run(&mixed_workload(3, 4.0), &users, None, &o).unwrap();
    let y = run(&mixed_workload(3, 4.0), &users, None, &o).unwrap();
    assert_eq!(x.report.to_canonical(), y.report.to_canonical());
    assert_eq!(x.decision_log(), y.decision_log());
    let z = run(&mixed_workload(4, 4.0), &users, None, &o).unwrap();
    assert_ne!(x.decision_log(), z.decision_log());
}

#[test]
fn frequent_crashes_replay_to_the_same_state() {
    let users = [office("a")];
    let o = RunOptions {
        mode: PolicyMode::Learned,
        seed: 5,
        ..RunOptions::default()
    };
    let clean = run(&mixed_workload(8, 2.0), &users, None, &o).unwrap();
    let crashed = run(&mixed_workload(8, 2.0), &users, None, &RunOptions { crash_every: 7, ..o }).unwrap();
    assert!(crashed.crashes > 10);
    assert!(clean.gateway == crashed.gateway);
    assert_eq!(clean.report.to_canonical(), crashed.report.to_canonical());
}

#[test]
fn bundled_scenarios_pass() {
    for name in ["travel-preapproval.json", "market-watcher.json"] {
        let s = scenario(name);
        let out = run(&Workload::empty(0), &[], Some(&s), &RunOptions::default()).unwrap();
        assert!(!out.report.assertions.is_empty());
        assert!(out.check().is_ok(), "{name}: {:?}", out.report.assertions);
    }
}

#[test]
fn scenario_mode_overrides_the_option() {
    let s = scenario("market-watcher.json");
    let out = run(&Workload::empty(0), &[], Some(&s), &RunOptions::default()).unwrap();
    assert_eq!(out.report.mode, "learned");
}

#[test]
fn violated_assertions_are_listed() {
    let mut s = scenario("travel-preapproval.json");
    s.assertions.push(serde_json::from_str(r#"{"kind": "notification_count", "name": "impossible", "op": "eq", "value": 99}"#).unwrap());
    let out = run(&Workload::empty(0), &[], Some(&s), &RunOptions::default()).unwrap();
    assert!(!out.report.passed);
    let err = out.check().unwrap_err().to_string();
    assert!(err.contains("impossible") && err.contains("count 2 == 99"), "{err}");
}

#[test]
fn duplicate_users_are_rejected() {
    let err = run(&Workload::empty(0), &[office("a"), office("a")], None, &RunOptions::default());
    assert!(err.is_err());
}

#[test]
fn cli_writes_report_and_decision_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let status = Command::new(env!("CARGO_BIN_EXE_simulate"))
        .args(["--workload", &data("workload.json"), "--users", &data("users.json")])
        .args(["--mode", "learned", "--seed", "7", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let report = std::fs::read_to_string(&out).unwrap();
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["mode"], "learned");
    assert!(v["alerts"].as_u64().unwrap() > 0);
    let log = std::fs::read_to_string(dir.path().join("report.decisions.jsonl")).unwrap();
    assert_eq!(log.lines().count() as u64, v["alerts"].as_u64().unwrap());
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let sim = |scenario: &str| {
        Command::new(env!("CARGO_BIN_EXE_simulate"))
            .args(["--workload", &data("empty-workload.json"), "--users", &data("no-users.json")])
            .args(["--scenario", scenario, "--out"])
            .arg(&out)
            .output()
            .unwrap()
    };
    assert_eq!(sim(&data("travel-preapproval.json")).status.code(), Some(0));

    let mut s = scenario("travel-preapproval.json");
    s.assertions.push(serde_json::from_str(r#"{"kind": "missed_critical_rate", "name": "never", "op": "gt", "value": 0.5}"#).unwrap());
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, serde_json::to_string(&s).unwrap()).unwrap();
    let o = sim(bad.to_str().unwrap());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("never"));
    assert!(out.exists());

    assert_eq!(sim("/nonexistent/scenario.json").status.code(), Some(2));
}

fn arb_source(i: usize) -> impl Strategy<Value = SourceSpec> {
    (0.0f64..6.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..0.3, 0.0f64..1.0, any::<bool>()).prop_map(
        move |(rate, info, warn, crit, urgency, repeated)| {
            let total = 1.0 + info + warn;
            SourceSpec {
                source_id: format!("s{i}"),
                event_type: format!("t{i}"),
                poisson_rate: rate,
                severity_mix: [
                    (Severity::Error, 1.0 / total),
                    (Severity::Info, info / total),
                    (Severity::Warning, 1.0 - (1.0 + info) / total),
                ]
                .into_iter()
                .collect(),
                critical_prob: crit,
                urgency,
                duration: if repeated { DurationKind::Repeated } else { DurationKind::OneShot },
            }
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn invariants_hold_on_every_run(
        sources in (arb_source(0), arb_source(1)),
        seed in any::<u64>(),
        learned in any::<bool>(),
        kappa in 0.0f64..1.0,
    ) {
        let w = Workload { sources: vec![sources.0, sources.1], duration: 3.0, seed };
        let mut u = office("u");
        u.fatigue_kappa = kappa;
        let mode = if learned { PolicyMode::Learned } else { PolicyMode::Baseline };
        let out = run(&w, &[u], None, &RunOptions { mode, seed, ..RunOptions::default() }).unwrap();
        let r = &out.report;
        prop_assert!(r.conservation.holds);
        prop_assert_eq!(r.missed_critical_rate, 0.0);
        for rate in [r.missed_critical_rate, r.suppressed_fraction, r.digest_ratio, r.negative_feedback_rate] {
            prop_assert!((0.0..=1.0).contains(&rate));
        }
        // Virtual-time causality.
        for n in out.gateway.notifications() {
            if let Some(f) = out.gateway.feedback_for(&n.notification_id) {
                let sent = n.dispatched_at.expect("feedback only on dispatched notifications");
                prop_assert!(f.observed_at >= sent);
            }
        }
    }
}
