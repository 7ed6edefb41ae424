//! Discrete-event driver: feeds workload arrivals, ticks and simulated user
//! responses into a gateway in timestamp order.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Duration, TimeZone, Utc};
use notigate_core::alerts::{Assignment, RuleMatch, RuleOrigin};
use notigate_core::availability::Preferences;
use notigate_core::config::{GatewayConfig, PolicyMode};
use notigate_core::gateway::{Command, Gateway, GatewayError, RuleInput};
use notigate_core::learning::user_seed;
use notigate_core::model::{Criticality, Layer, NotificationKind, Signal, TriageAction};
use notigate_core::notifier::{DispatchOutcome, NullTransport};
use notigate_core::store::{CrashPoint, Store, StoreConfig, StoreError};
use notigate_core::time::Timestamp;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use thiserror::Error;

use crate::report::{canonical_json, ratio, ConservationReport, DecisionCounts, MetricsReport};
use crate::scenario::{missed_critical, Scenario};
use crate::users::{simulate_user_response, SyntheticUser, UserError};
use crate::workload::{dims_tag, generate_workload, Workload, WorkloadError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    User(#[from] UserError),
    #[error("duplicate synthetic user `{0}`")]
    DuplicateUser(String),
    #[error("setup command {0} rejected: {1}")]
    Setup(&'static str, GatewayError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("gateway made no progress at {0}")]
    Stalled(Timestamp),
    #[error("scenario assertions failed: {}", .0.join("; "))]
    ScenarioAssertionFailed(Vec<String>),
}

pub fn default_start() -> Timestamp {
    // A Monday, so hour-of-week bins line up with calendar days.
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: GatewayConfig,
    pub mode: PolicyMode,
    pub seed: u64,
    pub start: Timestamp,
    /// Extra simulated time after the last arrival for windows, escalations
    /// and feedback timeouts to settle.
    pub settle_days: f64,
    /// Crash and recover the durable store every this many commands; 0 runs
    /// in memory.
    pub crash_every: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            config: GatewayConfig::default(),
            mode: PolicyMode::Baseline,
            seed: 0,
            start: default_start(),
            settle_days: 3.0,
            crash_every: 0,
        }
    }
}

pub struct SimOutput {
    pub report: MetricsReport,
    pub gateway: Gateway,
    pub users: Vec<SyntheticUser>,
    /// Simulated responses the gateway refused, e.g. after a feedback timeout.
    pub rejected_feedback: u64,
    pub crashes: u64,
}

impl SimOutput {
    /// Fails with every violated assertion, by name and detail.
    pub fn check(&self) -> Result<(), SimError> {
        let failed: Vec<String> = self
            .report
            .assertions
            .iter()
            .filter(|a| !a.passed)
            .map(|a| format!("{}: {}", a.name, a.detail))
            .collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(SimError::ScenarioAssertionFailed(failed))
        }
    }

    /// One canonical JSON decision per line, in decision order.
    pub fn decision_log(&self) -> String {
        let mut out = String::new();
        for d in self.gateway.decisions() {
            out.push_str(&canonical_json(&serde_json::to_value(d).expect("decision serializes")));
            out.push('\n');
        }
        out
    }
}

trait Driver {
    fn submit(&mut self, cmd: Command) -> Result<(), SimError>;
    fn gateway(&self) -> &Gateway;
    fn crashes(&self) -> u64 {
        0
    }
}

struct Direct(Gateway);

impl Driver for Direct {
    fn submit(&mut self, cmd: Command) -> Result<(), SimError> {
        self.0
            .execute(&cmd, &mut NullTransport)
            .map(|_| ())
            .map_err(|e| SimError::Setup(cmd.name(), e))
    }

    fn gateway(&self) -> &Gateway {
        &self.0
    }
}

/// Runs every command through the durable store and simulates a crash and
/// restart every `every` commands, cycling through the crash points.
struct Durable {
    store: Store,
    store_cfg: StoreConfig,
    config: GatewayConfig,
    every: u64,
    count: u64,
    crashes: u64,
    _dir: tempfile::TempDir,
}

const CRASH_POINTS: [CrashPoint; 3] = [CrashPoint::BeforeAppend, CrashPoint::AfterAppend, CrashPoint::AfterExecute];

impl Durable {
    fn new(config: GatewayConfig, every: u64) -> Result<Self, SimError> {
        let dir = tempfile::tempdir()?;
        let store_cfg = StoreConfig {
            data_dir: dir.path().to_path_buf(),
            snapshot_every: 97,
            fsync: false,
        };
        let store = Store::open(store_cfg.clone(), config.clone(), &mut NullTransport)?;
        Ok(Self {
            store,
            store_cfg,
            config,
            every,
            count: 0,
            crashes: 0,
            _dir: dir,
        })
    }
}

fn store_err(name: &'static str, e: StoreError) -> SimError {
    match e {
        StoreError::Rejected(g) => SimError::Setup(name, g),
        other => SimError::Store(other),
    }
}

impl Driver for Durable {
    fn submit(&mut self, cmd: Command) -> Result<(), SimError> {
        let name = cmd.name();
        self.count += 1;
        if !self.count.is_multiple_of(self.every) {
            return self.store.submit(cmd, &mut NullTransport).map(|_| ()).map_err(|e| store_err(name, e));
        }
        let point = CRASH_POINTS[(self.crashes % 3) as usize];
        self.crashes += 1;
        match self.store.submit_crashing(cmd.clone(), &mut NullTransport, point) {
            Err(StoreError::Crashed) => {}
            Err(e) => return Err(store_err(name, e)),
            Ok(_) => {}
        }
        self.store = Store::open(self.store_cfg.clone(), self.config.clone(), &mut NullTransport)?;
        if point == CrashPoint::BeforeAppend {
            // Nothing reached the log, so the client retries.
            self.store.submit(cmd, &mut NullTransport).map_err(|e| store_err(name, e))?;
        }
        Ok(())
    }

    fn gateway(&self) -> &Gateway {
        self.store.gateway()
    }

    fn crashes(&self) -> u64 {
        self.crashes
    }
}

fn days(d: f64) -> Duration {
    Duration::milliseconds((d * 86_400_000.0) as i64)
}

fn crit_name(c: Criticality) -> &'static str {
    match c {
        Criticality::Critical => "critical",
        Criticality::NonCritical => "non_critical",
    }
}

/// One rule per (source, severity, criticality) the workload can produce, so
/// each generated event carries its sampled dimensions into the alert.
fn workload_rules(workload: &Workload, user: &SyntheticUser) -> Vec<RuleInput> {
    let mut rules = Vec::new();
    for (i, s) in workload.sources.iter().enumerate() {
        if !user.subscribes_to(&s.source_id) {
            continue;
        }
        let mut crits = Vec::new();
        if s.critical_prob < 1.0 {
            crits.push(Criticality::NonCritical);
        }
        if s.critical_prob > 0.0 {
            crits.push(Criticality::Critical);
        }
        for (&sev, &p) in &s.severity_mix {
            if p <= 0.0 {
                continue;
            }
            for &crit in &crits {
                rules.push(RuleInput {
                    rule_id: Some(format!("sim-{}-{i}-{}-{}", user.user_id, sev.as_str(), crit_name(crit))),
                    user_id: user.user_id.clone(),
                    matcher: RuleMatch {
                        source: Some(s.source_id.clone()),
                        event_type: Some(s.event_type.clone()),
                        tags_any: Some(vec![dims_tag(sev, crit)]),
                        payload_eq: None,
                    },
                    assign: Assignment::full(sev, crit, s.urgency, s.duration),
                    enabled: true,
                    created_by: RuleOrigin::User,
                });
            }
        }
    }
    rules
}

enum Step {
    Tick(Timestamp),
    Arrival(usize),
    Response,
}

pub fn run(workload: &Workload, users: &[SyntheticUser], scenario: Option<&Scenario>, opts: &RunOptions) -> Result<SimOutput, SimError> {
    workload.validate()?;
    let mut workload = workload.clone();
    let mut users = users.to_vec();
    let mut start = opts.start;
    let mut mode = opts.mode;
    if let Some(s) = scenario {
        workload.sources.extend(s.sources.iter().cloned());
        workload.duration = workload.duration.max(s.duration);
        users.extend(s.users.iter().cloned());
        start = s.start.unwrap_or(start);
        mode = s.mode.unwrap_or(mode);
        workload.validate()?;
    }
    let mut seen = BTreeSet::new();
    for u in &users {
        u.validate()?;
        if !seen.insert(u.user_id.clone()) {
            return Err(SimError::DuplicateUser(u.user_id.clone()));
        }
    }

    let mut config = opts.config.clone();
    config.triage.policy_mode = mode;
    config.learning.seed = opts.seed;

    let mut driver: Box<dyn Driver> = if opts.crash_every > 0 {
        Box::new(Durable::new(config.clone(), opts.crash_every)?)
    } else {
        Box::new(Direct(Gateway::new(config.clone())))
    };

    // Setup happens at the start instant, before any arrival.
    for u in &users {
        driver.submit(Command::SetPreferences {
            preferences: Preferences::defaults(u.user_id.clone(), &config.users),
        })?;
        for rule in workload_rules(&workload, u) {
            driver.submit(Command::CreateRule { rule })?;
        }
    }
    if let Some(s) = scenario {
        for p in &s.preferences {
            driver.submit(Command::SetPreferences { preferences: p.clone() })?;
        }
        for rule in &s.rules {
            driver.submit(Command::CreateRule { rule: rule.clone() })?;
        }
        for h in &s.history {
            driver.submit(Command::SeedHistory {
                cluster_key: h.cluster_key.clone(),
                daily_counts: h.daily_counts.clone(),
                before: h.before.unwrap_or(start),
            })?;
        }
    }

    let mut arrivals: Vec<(Timestamp, Value)> = generate_workload(&workload, start)
        .into_iter()
        .map(|e| (e.at, e.document))
        .collect();
    if let Some(s) = scenario {
        arrivals.extend(s.events.iter().map(|e| (e.at, e.event.clone())));
    }
    // Stable, so generated events precede scripted ones at equal instants.
    arrivals.sort_by_key(|(at, _)| *at);

    let last_arrival = arrivals.last().map(|(t, _)| *t).unwrap_or(start);
    let horizon = (start + days(workload.duration)).max(last_arrival) + days(opts.settle_days);

    let by_id: BTreeMap<&str, &SyntheticUser> = users.iter().map(|u| (u.user_id.as_str(), u)).collect();
    let mut rngs: BTreeMap<String, ChaCha8Rng> = users
        .iter()
        .map(|u| (u.user_id.clone(), ChaCha8Rng::seed_from_u64(user_seed(opts.seed ^ u.rng_seed, &u.user_id))))
        .collect();
    let mut responses: BTreeMap<(Timestamp, u64), (String, Signal)> = BTreeMap::new();
    let mut response_seq = 0u64;
    let mut responded: BTreeSet<String> = BTreeSet::new();
    let mut cursor = 0usize;
    let mut next_arrival = 0usize;
    let mut ingested = 0u64;
    let mut rejected_feedback = 0u64;
    let mut last_tick: Option<(Timestamp, u32)> = None;

    loop {
        let gw = driver.gateway();
        let due = gw.next_due();
        let arrival = arrivals.get(next_arrival).map(|(t, _)| *t);
        let response = responses.keys().next().map(|(t, _)| *t);
        let mut step = None;
        let mut best: Option<Timestamp> = None;
        // Ticks win ties, then arrivals, then responses.
        for (t, s) in [
            (due, Step::Tick(due.unwrap_or(start))),
            (arrival, Step::Arrival(next_arrival)),
            (response, Step::Response),
        ] {
            if let Some(t) = t {
                if best.is_none_or(|b| t < b) {
                    best = Some(t);
                    step = Some(s);
                }
            }
        }
        let (Some(at), Some(step)) = (best, step) else { break };
        if at > horizon {
            break;
        }
        match step {
            Step::Tick(now) => {
                let repeats = match last_tick {
                    Some((t, n)) if t == now => n + 1,
                    _ => 0,
                };
                if repeats > 3 {
                    return Err(SimError::Stalled(now));
                }
                last_tick = Some((now, repeats));
                driver.submit(Command::Tick { now })?;
            }
            Step::Arrival(i) => {
                next_arrival += 1;
                let cmd = Command::Ingest {
                    watcher_id: None,
                    event: arrivals[i].1.clone(),
                    received_at: arrivals[i].0,
                };
                match driver.submit(cmd) {
                    Ok(()) => ingested += 1,
                    Err(SimError::Setup(_, GatewayError::Ingest(_))) => {}
                    Err(e) => return Err(e),
                }
            }
            Step::Response => {
                let (key, (notification_id, signal)) = responses.pop_first().expect("peeked response");
                let cmd = Command::Feedback {
                    notification_id,
                    signal,
                    at: key.0,
                    explicit: true,
                };
                match driver.submit(cmd) {
                    Ok(()) => {}
                    Err(SimError::Setup(..)) => rejected_feedback += 1,
                    Err(e) => return Err(e),
                }
            }
        }

        let gw = driver.gateway();
        for entry in &gw.outbox()[cursor..] {
            if !responded.insert(entry.notification_id.clone()) {
                continue;
            }
            let Some(user) = by_id.get(entry.user_id.as_str()) else { continue };
            let rng = rngs.get_mut(&entry.user_id).expect("rng per user");
            let interruptions = gw.interruptions_last_hour(&entry.user_id, entry.sent_at).saturating_sub(1);
            let r = simulate_user_response(user, rng, entry.sent_at, interruptions);
            // Silence is left to the gateway's feedback timeout.
            if r.signal != Signal::Ignored {
                responses.insert((r.at, response_seq), (entry.notification_id.clone(), r.signal));
                response_seq += 1;
            }
        }
        cursor = gw.outbox().len();
    }

    let crashes = driver.crashes();
    let gateway = driver.gateway().clone();
    let mut report = build_report(&gateway, &users, &workload, mode, opts.seed, ingested);
    if let Some(s) = scenario {
        report.scenario = Some(s.name.clone());
        report.assertions = s.assertions.iter().map(|a| a.evaluate(&gateway, &users)).collect();
    }
    report.passed = report.assertions.iter().all(|a| a.passed);
    Ok(SimOutput {
        report,
        gateway,
        users,
        rejected_feedback,
        crashes,
    })
}

fn build_report(gw: &Gateway, users: &[SyntheticUser], workload: &Workload, mode: PolicyMode, seed: u64, events: u64) -> MetricsReport {
    let alerts = gw.alerts().count() as u64;
    let critical_alerts = gw.alerts().filter(|a| a.is_critical()).count() as u64;
    let mut decisions = DecisionCounts::default();
    for d in gw.decisions() {
        match d.action {
            TriageAction::Issue => decisions.issue += 1,
            TriageAction::Suppress => decisions.suppress += 1,
            TriageAction::Aggregate { .. } => decisions.aggregate += 1,
        }
        match d.layer {
            Layer::Safeguard => decisions.safeguard += 1,
            Layer::Dedup => decisions.dedup += 1,
            _ => {}
        }
    }

    let mut notifications = 0;
    let mut digests = 0;
    let mut dispatched = 0;
    let mut sends = 0;
    let mut digest_alerts_delivered = 0;
    let mut single_alerts_delivered = 0;
    let mut feedback = 0;
    let mut negative = 0;
    let mut delay_secs = 0i64;
    let mut delays = 0u64;
    for n in gw.notifications() {
        notifications += 1;
        let is_digest = matches!(n.kind, NotificationKind::Digest { .. });
        if is_digest {
            digests += 1;
        }
        let view = gw.notification_view(n);
        sends += view.dispatch_records.iter().filter(|r| r.outcome == DispatchOutcome::Sent).count() as u64;
        if let Some(t) = n.dispatched_at {
            dispatched += 1;
            let members = n.kind.alert_ids().len() as u64;
            if is_digest {
                digest_alerts_delivered += members;
            } else {
                single_alerts_delivered += members;
            }
            if let Some(f) = gw.feedback_for(&n.notification_id) {
                feedback += 1;
                if f.signal.is_negative() {
                    negative += 1;
                }
                if f.explicit && f.signal.is_engagement() {
                    delay_secs += (f.observed_at - t).num_seconds();
                    delays += 1;
                }
            }
        }
    }

    let (missed, critical_total) = missed_critical(gw);
    let c = gw.conservation();
    let user_days = users.len() as f64 * workload.duration;
    MetricsReport {
        scenario: None,
        mode: match mode {
            PolicyMode::Baseline => "baseline",
            PolicyMode::Learned => "learned",
        }
        .to_string(),
        seed,
        users: users.len() as u64,
        days: workload.duration,
        events,
        alerts,
        critical_alerts,
        decisions,
        notifications,
        digests,
        dispatched,
        sends,
        feedback,
        missed_critical_rate: ratio(missed, critical_total),
        interruptions_per_user_day: if user_days > 0.0 { sends as f64 / user_days } else { 0.0 },
        mean_response_delay_minutes: if delays == 0 { 0.0 } else { delay_secs as f64 / delays as f64 / 60.0 },
        suppressed_fraction: ratio(decisions_suppressed(gw), alerts),
        digest_ratio: ratio(digest_alerts_delivered, digest_alerts_delivered + single_alerts_delivered),
        negative_feedback_rate: ratio(negative, feedback),
        conservation: ConservationReport {
            alerts: c.alerts,
            issued: c.issued,
            digest_members: c.digest_members,
            suppressed: c.suppressed,
            waiting_in_windows: c.waiting_in_windows,
            holds: c.holds(),
        },
        assertions: Vec::new(),
        passed: true,
    }
}

fn decisions_suppressed(gw: &Gateway) -> u64 {
    gw.decisions().filter(|d| d.action == TriageAction::Suppress).count() as u64
}
