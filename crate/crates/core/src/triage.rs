//! Per-alert issue / suppress / aggregate decisions and the digest windows
//! that aggregated alerts wait in.
//!
//! Decisions pass through three layers in fixed order. Critical alerts are
//! issued by the safeguard before anything else runs; repeated non-critical
//! alerts from a cluster that was just forwarded are deduplicated; whatever
//! remains goes to the baseline rule table or the learned policy.

use std::collections::{BTreeMap, BTreeSet};

use chrono::Duration;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::availability::{AvailabilityHistogram, Preferences};
use crate::config::{PolicyMode, TriageConfig};
use crate::learning::{BanditAction, PolicyState, FEATURE_DIM};
use crate::model::{
    severity_rank, Alert, DeliveryCycle, DurationKind, Layer, Notification, NotificationKind, PolicyKind, Severity,
    TraceEntry, TriageAction, TriageDecision,
};
use crate::time::{format_rfc3339, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowState {
    Open,
    Flushed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigestWindow {
    pub window_id: String,
    pub user_id: String,
    pub cluster_key: String,
    pub opened_at: Timestamp,
    pub deadline: Timestamp,
    pub member_alert_ids: Vec<String>,
    pub state: WindowState,
    /// Earliest due date among the members, if any carry one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub due_at: Option<Timestamp>,
    pub length_secs: u64,
}

pub type PolicyFeatures = [f64; FEATURE_DIM];

/// What triage needs to know about the user at decision time.
pub struct UserContext<'a> {
    pub histogram: &'a AvailabilityHistogram,
    pub prefs: &'a Preferences,
    pub interruptions_last_hour: u32,
    pub max_defer: Duration,
    /// Release time for a due-dated alert whose cluster is expected to keep
    /// producing alerts before the due date.
    pub hold_until: Option<Timestamp>,
}

pub fn extract_features(alert: &Alert, availability: f64, interruptions_last_hour: u32) -> PolicyFeatures {
    [
        1.0,
        severity_rank(alert.severity) as f64 / 3.0,
        alert.urgency.clamp(0.0, 1.0),
        availability.clamp(0.0, 1.0),
        (interruptions_last_hour as f64 / 10.0).min(1.0),
        if alert.duration == DurationKind::Repeated { 1.0 } else { 0.0 },
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("window {0} has no members")]
pub struct EmptyWindow(pub String);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Triage {
    windows: BTreeMap<String, DigestWindow>,
    /// user -> cluster -> open window
    open: BTreeMap<String, BTreeMap<String, String>>,
    due: BTreeSet<(Timestamp, String)>,
    /// Last Issue/Aggregate per (user, cluster), for dedup.
    last_forwarded: BTreeMap<String, BTreeMap<String, Timestamp>>,
    /// Due dates of every window each user has had, flushed or not.
    dues: BTreeMap<String, BTreeSet<Timestamp>>,
    next_window: u64,
}

fn fmt_features(x: &[f64]) -> String {
    let parts: Vec<String> = x.iter().map(|v| format!("{v:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

impl Triage {
    pub fn window(&self, window_id: &str) -> Option<&DigestWindow> {
        self.windows.get(window_id)
    }

    pub fn windows(&self) -> impl Iterator<Item = &DigestWindow> {
        self.windows.values()
    }

    pub fn open_windows(&self) -> impl Iterator<Item = &DigestWindow> {
        self.open
            .values()
            .flat_map(|m| m.values())
            .filter_map(|id| self.windows.get(id))
    }

    pub fn open_window_for(&self, user_id: &str, cluster_key: &str) -> Option<&DigestWindow> {
        self.open
            .get(user_id)
            .and_then(|m| m.get(cluster_key))
            .and_then(|id| self.windows.get(id))
    }

    pub fn next_deadline(&self) -> Option<Timestamp> {
        self.due.first().map(|(t, _)| *t)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn decide(
        &mut self,
        alert: &Alert,
        ctx: &UserContext<'_>,
        cfg: &TriageConfig,
        mode: PolicyMode,
        policy: &mut PolicyState,
        decision_id: String,
        now: Timestamp,
    ) -> TriageDecision {
        let availability = ctx.histogram.availability_score(now);
        let x = extract_features(alert, availability, ctx.interruptions_last_hour);
        let mode_kind = match mode {
            PolicyMode::Baseline => PolicyKind::Baseline,
            PolicyMode::Learned => PolicyKind::Learned,
        };
        let mut trace = Vec::new();
        let mut q_values = None;

        let (choice, policy_kind, layer) = if alert.is_critical() {
            trace.push(TraceEntry::new("layer", "safeguard"));
            trace.push(TraceEntry::new("safeguard", "critical alerts are issued immediately on every policy"));
            (BanditAction::Issue, PolicyKind::Safeguard, Layer::Safeguard)
        } else if let Some(prev) = self.recent_forward(alert, cfg.dedup_window(), now) {
            trace.push(TraceEntry::new("layer", "dedup"));
            trace.push(TraceEntry::new(
                "dedup",
                format!(
                    "repeated alert; {} was already forwarded at {} (window {}s)",
                    alert.cluster_key,
                    format_rfc3339(prev),
                    cfg.dedup_window_secs
                ),
            ));
            (BanditAction::Suppress, mode_kind, Layer::Dedup)
        } else {
            match mode {
                PolicyMode::Baseline => {
                    trace.push(TraceEntry::new("layer", "baseline"));
                    let (action, why) = if alert.severity == Severity::Error {
                        (BanditAction::Issue, "severity is error".to_string())
                    } else if alert.urgency >= cfg.issue_urgency {
                        (
                            BanditAction::Issue,
                            format!("urgency {:.2} >= {:.2}", alert.urgency, cfg.issue_urgency),
                        )
                    } else if alert.severity == Severity::NotAvailable {
                        (BanditAction::Suppress, "severity is not available".to_string())
                    } else {
                        (BanditAction::Aggregate, "no issue or suppress rule fired".to_string())
                    };
                    trace.push(TraceEntry::new("baseline", format!("{why} -> {}", action.as_str())));
                    (action, PolicyKind::Baseline, Layer::Baseline)
                }
                PolicyMode::Learned => {
                    trace.push(TraceEntry::new("layer", "learned"));
                    let sel = policy
                        .select_action(&x)
                        .expect("feature vectors always have the policy dimension");
                    trace.push(TraceEntry::new(
                        "q_values",
                        format!(
                            "issue={:.4} aggregate={:.4} suppress={:.4}",
                            sel.q_values[0], sel.q_values[1], sel.q_values[2]
                        ),
                    ));
                    trace.push(TraceEntry::new(
                        "exploration",
                        if sel.explored {
                            format!("random action (epsilon {:.4})", policy.epsilon)
                        } else {
                            format!("greedy action (epsilon {:.4})", policy.epsilon)
                        },
                    ));
                    q_values = Some(sel.q_values.to_vec());
                    (sel.action, PolicyKind::Learned, Layer::Learned)
                }
            }
        };
        trace.push(TraceEntry::new("features", fmt_features(&x)));

        let action = match choice {
            BanditAction::Issue => TriageAction::Issue,
            BanditAction::Suppress => TriageAction::Suppress,
            BanditAction::Aggregate => {
                let (window_id, opened) = self.aggregate(alert, ctx, cfg, now);
                let w = &self.windows[&window_id];
                trace.push(TraceEntry::new(
                    "window",
                    format!(
                        "{} {} until {}",
                        if opened { "opened" } else { "joined" },
                        window_id,
                        format_rfc3339(w.deadline)
                    ),
                ));
                TriageAction::Aggregate { window_id }
            }
        };
        if choice != BanditAction::Suppress {
            self.last_forwarded
                .entry(alert.user_id.clone())
                .or_default()
                .insert(alert.cluster_key.clone(), now);
        }

        TriageDecision {
            decision_id,
            alert_id: alert.alert_id.clone(),
            user_id: alert.user_id.clone(),
            action,
            policy_kind,
            layer,
            feature_vector: x.to_vec(),
            q_values,
            trace,
            decided_at: now,
        }
    }

    fn recent_forward(&self, alert: &Alert, window: Duration, now: Timestamp) -> Option<Timestamp> {
        if alert.duration != DurationKind::Repeated {
            return None;
        }
        let prev = *self.last_forwarded.get(&alert.user_id)?.get(&alert.cluster_key)?;
        (now - prev <= window).then_some(prev)
    }

    fn set_deadline(&mut self, window_id: &str, deadline: Timestamp) {
        let w = self.windows.get_mut(window_id).expect("window exists");
        self.due.remove(&(w.deadline, w.window_id.clone()));
        w.deadline = deadline;
        self.due.insert((deadline, w.window_id.clone()));
    }

    /// Joins the open window for the alert's (user, cluster) or opens one.
    fn aggregate(&mut self, alert: &Alert, ctx: &UserContext<'_>, cfg: &TriageConfig, now: Timestamp) -> (String, bool) {
        if let Some(id) = self.open.get(&alert.user_id).and_then(|m| m.get(&alert.cluster_key)).cloned() {
            let w = self.windows.get_mut(&id).expect("open window exists");
            w.member_alert_ids.push(alert.alert_id.clone());
            if let Some(due) = alert.due_at {
                w.due_at = Some(w.due_at.map_or(due, |d| d.min(due)));
                self.dues.entry(alert.user_id.clone()).or_default().insert(due);
            }
            return (id, false);
        }

        self.next_window += 1;
        let window_id = format!("wn-{:08}", self.next_window);
        let length_secs = ctx.prefs.digest_window_length_secs.unwrap_or(cfg.window_length_secs);
        let deadline = match ctx.hold_until {
            Some(hold) if hold > now => hold,
            _ => availability_deadline(ctx, now, now + Duration::seconds(length_secs as i64)),
        };
        self.windows.insert(
            window_id.clone(),
            DigestWindow {
                window_id: window_id.clone(),
                user_id: alert.user_id.clone(),
                cluster_key: alert.cluster_key.clone(),
                opened_at: now,
                deadline,
                member_alert_ids: vec![alert.alert_id.clone()],
                state: WindowState::Open,
                due_at: alert.due_at,
                length_secs,
            },
        );
        self.due.insert((deadline, window_id.clone()));
        self.open
            .entry(alert.user_id.clone())
            .or_default()
            .insert(alert.cluster_key.clone(), window_id.clone());
        self.defer_later_due(&alert.user_id, &window_id, now);
        (window_id, true)
    }

    /// Keeps a window with a later due date closed until every earlier due
    /// date of the same user has passed, and pushes back open windows that
    /// are due after the new one.
    fn defer_later_due(&mut self, user_id: &str, new_id: &str, now: Timestamp) {
        let Some(new_due) = self.windows[new_id].due_at else {
            return;
        };
        let dues = self.dues.entry(user_id.to_string()).or_default();
        let earlier = dues.range((std::ops::Bound::Excluded(now), std::ops::Bound::Excluded(new_due))).next_back().copied();
        dues.insert(new_due);
        if let Some(due) = earlier {
            if self.windows[new_id].deadline < due {
                self.set_deadline(new_id, due);
            }
        }
        let later: Vec<String> = self.open[user_id]
            .values()
            .filter(|id| *id != new_id)
            .filter(|id| {
                let w = &self.windows[*id];
                w.due_at.is_some_and(|d| d > new_due) && w.deadline < new_due
            })
            .cloned()
            .collect();
        for id in later {
            self.set_deadline(&id, new_due);
        }
    }

    /// Closes every open window whose deadline has arrived, earliest first.
    pub fn flush_due_windows(&mut self, now: Timestamp) -> Vec<DigestWindow> {
        let mut flushed = Vec::new();
        while let Some((deadline, id)) = self.due.first().cloned() {
            if deadline > now {
                break;
            }
            self.due.pop_first();
            let w = self.windows.get_mut(&id).expect("indexed window exists");
            w.state = WindowState::Flushed;
            if let Some(m) = self.open.get_mut(&w.user_id) {
                m.remove(&w.cluster_key);
                if m.is_empty() {
                    self.open.remove(&w.user_id);
                }
            }
            flushed.push(w.clone());
        }
        flushed
    }

    /// Test hook: registers an already-open window as-is.
    #[doc(hidden)]
    pub fn insert_window(&mut self, window: DigestWindow) {
        if window.state == WindowState::Open {
            self.due.insert((window.deadline, window.window_id.clone()));
            self.open
                .entry(window.user_id.clone())
                .or_default()
                .insert(window.cluster_key.clone(), window.window_id.clone());
        }
        self.windows.insert(window.window_id.clone(), window);
    }
}

/// Nominal deadline moved to when the user can actually read it: if the user
/// is away now but back before `nominal`, the window closes on their return;
/// otherwise it closes at the first available slot from `nominal` on.
fn availability_deadline(ctx: &UserContext<'_>, now: Timestamp, nominal: Timestamp) -> Timestamp {
    let slot_now = ctx.histogram.next_available_slot(ctx.prefs, now, ctx.max_defer);
    if slot_now > now && slot_now < nominal {
        return slot_now;
    }
    ctx.histogram.next_available_slot(ctx.prefs, nominal, ctx.max_defer)
}

/// Builds the digest for a flushed window. Members are listed by creation time.
pub fn form_digest(
    window: &DigestWindow,
    alerts: &BTreeMap<String, Alert>,
    notification_id: String,
    channel: crate::model::Channel,
    now: Timestamp,
) -> Result<Notification, EmptyWindow> {
    let mut members: Vec<&Alert> = window.member_alert_ids.iter().filter_map(|id| alerts.get(id)).collect();
    if members.is_empty() {
        return Err(EmptyWindow(window.window_id.clone()));
    }
    members.sort_by_key(|a| a.created_at);
    let kind = NotificationKind::Digest {
        window_id: window.window_id.clone(),
        alert_ids: members.iter().map(|a| a.alert_id.clone()).collect(),
    };
    Ok(Notification {
        notification_id,
        user_id: window.user_id.clone(),
        body: crate::notifier::render_text(&kind, &members),
        kind,
        channel,
        cycle: DeliveryCycle::periodic(window.length_secs).unwrap_or(DeliveryCycle::Aperiodic),
        scheduled_at: now,
        dispatched_at: None,
        acknowledged_at: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{GatewayConfig, UserModelConfig};
    use crate::model::{Channel, Criticality, Signal};
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    fn t0() -> Timestamp {
        Utc.with_ymd_and_hms(2024, 1, 1, 10, 0, 0).unwrap()
    }

    fn alert(id: &str, sev: Severity, crit: Criticality, urgency: f64, dur: DurationKind) -> Alert {
        Alert {
            alert_id: id.into(),
            event_id: format!("ev-{id}"),
            user_id: "u1".into(),
            rule_id: None,
            source_id: "src".into(),
            event_type: "kind".into(),
            severity: sev,
            criticality: crit,
            urgency,
            duration: dur,
            cluster_key: "src/kind".into(),
            tags: BTreeSet::new(),
            body: "body".into(),
            created_at: t0(),
            due_at: None,
        }
    }

    struct Fixture {
        hist: AvailabilityHistogram,
        prefs: Preferences,
        cfg: GatewayConfig,
        policy: PolicyState,
        triage: Triage,
        n: u32,
    }

    impl Fixture {
        fn new() -> Self {
            let cfg = GatewayConfig::default();
            let mut hist = AvailabilityHistogram::new("u1", 0);
            // Always available, so window deadlines stay nominal.
            for h in 0..168 {
                for _ in 0..3 {
                    hist.record_engagement(Signal::Acted, t0() + Duration::hours(h));
                }
            }
            Self {
                hist,
                prefs: Preferences::defaults("u1", &UserModelConfig::default()),
                policy: PolicyState::from_config("u1", &cfg.learning),
                cfg,
                triage: Triage::default(),
                n: 0,
            }
        }

        fn decide(&mut self, a: &Alert, mode: PolicyMode, now: Timestamp) -> TriageDecision {
            self.decide_held(a, mode, now, None)
        }

        fn decide_held(&mut self, a: &Alert, mode: PolicyMode, now: Timestamp, hold: Option<Timestamp>) -> TriageDecision {
            self.n += 1;
            let ctx = UserContext {
                histogram: &self.hist,
                prefs: &self.prefs,
                interruptions_last_hour: 0,
                max_defer: Duration::hours(24),
                hold_until: hold,
            };
            self.triage.decide(a, &ctx, &self.cfg.triage, mode, &mut self.policy, format!("dc-{}", self.n), now)
        }
    }

    #[test]
    fn feature_vector_examples() {
        let a = alert("a", Severity::Error, Criticality::NonCritical, 0.9, DurationKind::OneShot);
        assert_eq!(extract_features(&a, 1.0, 0), [1.0, 1.0, 0.9, 1.0, 0.0, 0.0]);
        let b = alert("b", Severity::NotAvailable, Criticality::NonCritical, 0.3, DurationKind::OneShot);
        assert_eq!(extract_features(&b, 0.0, 0), [1.0, 0.0, 0.3, 0.0, 0.0, 0.0]);
        assert_eq!(extract_features(&b, 0.0, 25)[4], 1.0);
        let c = alert("c", Severity::Info, Criticality::NonCritical, 0.3, DurationKind::Repeated);
        assert_eq!(extract_features(&c, 0.0, 5)[4..], [0.5, 1.0]);
    }

    #[test]
    fn safeguard_precedes_learned_policy() {
        let mut f = Fixture::new();
        f.hist = AvailabilityHistogram::new("u1", 0);
        f.policy.weights[2] = [10.0; 6];
        let a = alert("a", Severity::Info, Criticality::Critical, 0.1, DurationKind::Repeated);
        let d = f.decide(&a, PolicyMode::Learned, t0());
        assert_eq!(d.action, TriageAction::Issue);
        assert_eq!((d.policy_kind, d.layer), (PolicyKind::Safeguard, Layer::Safeguard));
        assert_eq!(d.trace[0], TraceEntry::new("layer", "safeguard"));
    }

    #[test]
    fn baseline_rule_table() {
        let mut f = Fixture::new();
        let info = alert("a", Severity::Info, Criticality::NonCritical, 0.2, DurationKind::OneShot);
        let d = f.decide(&info, PolicyMode::Baseline, t0());
        let TriageAction::Aggregate { window_id } = &d.action else { panic!("{:?}", d.action) };
        let w = f.triage.window(window_id).unwrap();
        assert_eq!(w.cluster_key, "src/kind");
        assert_eq!(w.deadline, t0() + Duration::hours(4));

        let err = alert("b", Severity::Error, Criticality::NonCritical, 0.1, DurationKind::OneShot);
        assert_eq!(f.decide(&err, PolicyMode::Baseline, t0()).action, TriageAction::Issue);
        let urgent = alert("c", Severity::Warning, Criticality::NonCritical, 0.85, DurationKind::OneShot);
        assert_eq!(f.decide(&urgent, PolicyMode::Baseline, t0()).action, TriageAction::Issue);
        let na = alert("d", Severity::NotAvailable, Criticality::NonCritical, 0.1, DurationKind::OneShot);
        assert_eq!(f.decide(&na, PolicyMode::Baseline, t0()).action, TriageAction::Suppress);
    }

    #[test]
    fn repeated_alerts_are_deduplicated() {
        let mut f = Fixture::new();
        let first = alert("a", Severity::Warning, Criticality::NonCritical, 0.9, DurationKind::Repeated);
        assert_eq!(f.decide(&first, PolicyMode::Baseline, t0()).action, TriageAction::Issue);
        let again = alert("b", Severity::Warning, Criticality::NonCritical, 0.9, DurationKind::Repeated);
        let d = f.decide(&again, PolicyMode::Baseline, t0() + Duration::minutes(5));
        assert_eq!(d.action, TriageAction::Suppress);
        assert_eq!(d.layer, Layer::Dedup);
        // Outside the dedup window the policy decides again.
        let late = alert("c", Severity::Warning, Criticality::NonCritical, 0.9, DurationKind::Repeated);
        assert_eq!(f.decide(&late, PolicyMode::Baseline, t0() + Duration::minutes(40)).action, TriageAction::Issue);
        // One-shot alerts are never deduplicated.
        let oneshot = alert("d", Severity::Warning, Criticality::NonCritical, 0.9, DurationKind::OneShot);
        assert_eq!(f.decide(&oneshot, PolicyMode::Baseline, t0() + Duration::minutes(41)).action, TriageAction::Issue);
    }

    #[test]
    fn learned_decisions_carry_q_values() {
        let mut f = Fixture::new();
        f.policy.epsilon = 0.0;
        f.policy.epsilon_floor = 0.0;
        f.policy.weights[2][0] = 1.0;
        let a = alert("a", Severity::Info, Criticality::NonCritical, 0.2, DurationKind::OneShot);
        let d = f.decide(&a, PolicyMode::Learned, t0());
        assert_eq!(d.action, TriageAction::Suppress);
        assert_eq!(d.layer, Layer::Learned);
        assert_eq!(d.q_values.as_deref(), Some(&[0.0, 0.0, 1.0][..]));
        assert!(d.trace.iter().any(|t| t.rule == "exploration"));
    }

    #[test]
    fn one_open_window_per_cluster() {
        let mut f = Fixture::new();
        let mut ids = BTreeSet::new();
        for i in 0..5 {
            let a = alert(&format!("a{i}"), Severity::Info, Criticality::NonCritical, 0.2, DurationKind::OneShot);
            if let TriageAction::Aggregate { window_id } = f.decide(&a, PolicyMode::Baseline, t0()).action {
                ids.insert(window_id);
            }
        }
        assert_eq!(ids.len(), 1);
        let w = f.triage.window(ids.first().unwrap()).unwrap();
        assert_eq!(w.member_alert_ids.len(), 5);
    }

    #[test]
    fn flush_in_deadline_order_and_idempotent() {
        let mut f = Fixture::new();
        assert!(f.triage.flush_due_windows(t0()).is_empty());
        let mut a = alert("a", Severity::Info, Criticality::NonCritical, 0.2, DurationKind::OneShot);
        f.decide(&a, PolicyMode::Baseline, t0() + Duration::hours(1));
        a.alert_id = "b".into();
        a.cluster_key = "src/other".into();
        f.decide(&a, PolicyMode::Baseline, t0());
        let at = t0() + Duration::hours(6);
        let flushed = f.triage.flush_due_windows(at);
        assert_eq!(flushed.len(), 2);
        assert!(flushed[0].deadline < flushed[1].deadline);
        assert_eq!(flushed[0].member_alert_ids, vec!["b".to_string()]);
        assert!(flushed.iter().all(|w| w.state == WindowState::Flushed));
        assert!(f.triage.flush_due_windows(at).is_empty());
        assert_eq!(f.triage.open_windows().count(), 0);
    }

    fn store(alerts: &[Alert]) -> BTreeMap<String, Alert> {
        alerts.iter().map(|a| (a.alert_id.clone(), a.clone())).collect()
    }

    #[test]
    fn digest_groups_members() {
        let mut alerts = Vec::new();
        for (i, ty) in ["a", "a", "b"].iter().enumerate() {
            let mut x = alert(&format!("x{i}"), Severity::Info, Criticality::NonCritical, 0.2, DurationKind::OneShot);
            x.event_type = ty.to_string();
            x.created_at = t0() + Duration::minutes(10 - i as i64);
            alerts.push(x);
        }
        let window = DigestWindow {
            window_id: "wn-1".into(),
            user_id: "u1".into(),
            cluster_key: "src/kind".into(),
            opened_at: t0(),
            deadline: t0(),
            member_alert_ids: alerts.iter().map(|a| a.alert_id.clone()).collect(),
            state: WindowState::Flushed,
            due_at: None,
            length_secs: 14_400,
        };
        let n = form_digest(&window, &store(&alerts), "nt-1".into(), Channel::Console, t0()).unwrap();
        let NotificationKind::Digest { alert_ids, .. } = &n.kind else { panic!() };
        assert_eq!(alert_ids, &vec!["x2".to_string(), "x1".into(), "x0".into()]);
        assert!(n.body.starts_with("3 alerts"));
        assert!(n.body.contains("a (2)"));
        assert!(n.body.contains("b (1)"));

        let empty = DigestWindow { member_alert_ids: vec![], ..window };
        assert_eq!(
            form_digest(&empty, &store(&alerts), "nt-2".into(), Channel::Console, t0()),
            Err(EmptyWindow("wn-1".into()))
        );
    }

    #[test]
    fn five_requests_one_digest() {
        let mut f = Fixture::new();
        let mut alerts = Vec::new();
        for i in 0..5 {
            let mut a = alert(&format!("r{i}"), Severity::Info, Criticality::NonCritical, 0.3, DurationKind::OneShot);
            a.created_at = t0() + Duration::minutes(i);
            f.decide(&a, PolicyMode::Baseline, a.created_at);
            alerts.push(a);
        }
        let flushed = f.triage.flush_due_windows(t0() + Duration::hours(5));
        assert_eq!(flushed.len(), 1);
        let n = form_digest(&flushed[0], &store(&alerts), "nt-1".into(), Channel::Console, t0()).unwrap();
        assert_eq!(n.kind.alert_ids().len(), 5);
        assert!(n.body.contains("5 alerts"));
    }

    #[test]
    fn unavailable_user_gets_window_closed_on_return() {
        let mut f = Fixture::new();
        let mut hist = AvailabilityHistogram::new("u1", 0);
        for _ in 0..3 {
            hist.record_engagement(Signal::Acted, Utc.with_ymd_and_hms(2024, 1, 1, 12, 0, 0).unwrap());
        }
        f.hist = hist;
        let a = alert("a", Severity::Info, Criticality::NonCritical, 0.2, DurationKind::OneShot);
        let d = f.decide(&a, PolicyMode::Baseline, t0());
        let TriageAction::Aggregate { window_id } = d.action else { panic!() };
        assert_eq!(f.triage.window(&window_id).unwrap().deadline, t0() + Duration::hours(2));
    }

    #[test]
    fn due_dated_windows_defer_to_earlier_due() {
        let mut f = Fixture::new();
        let due_a = t0() + Duration::days(5);
        let due_b = t0() + Duration::days(20);
        let mut a = alert("a", Severity::Info, Criticality::NonCritical, 0.3, DurationKind::OneShot);
        a.cluster_key = "hr/conf-a".into();
        a.due_at = Some(due_a);
        let d = f.decide_held(&a, PolicyMode::Baseline, t0(), Some(due_a - Duration::hours(24)));
        let TriageAction::Aggregate { window_id: wa } = d.action else { panic!() };
        assert_eq!(f.triage.window(&wa).unwrap().deadline, due_a - Duration::hours(24));

        let mut b = alert("b", Severity::Info, Criticality::NonCritical, 0.3, DurationKind::OneShot);
        b.cluster_key = "hr/conf-b".into();
        b.due_at = Some(due_b);
        let d = f.decide(&b, PolicyMode::Baseline, t0() + Duration::hours(1));
        let TriageAction::Aggregate { window_id: wb } = d.action else { panic!() };
        assert_eq!(f.triage.window(&wb).unwrap().deadline, due_a);

        // A later B-cluster alert after A's window closed is still held.
        f.triage.flush_due_windows(due_a - Duration::hours(24));
        f.triage.flush_due_windows(due_a);
        let mut c = b.clone();
        c.alert_id = "c".into();
        c.cluster_key = "hr/conf-b2".into();
        let d = f.decide(&c, PolicyMode::Baseline, due_a - Duration::hours(12));
        let TriageAction::Aggregate { window_id: wc } = d.action else { panic!() };
        assert_eq!(f.triage.window(&wc).unwrap().deadline, due_a);
    }

    fn arb_alert() -> impl Strategy<Value = Alert> {
        (
            prop::sample::select(Severity::ALL.to_vec()),
            prop::bool::ANY,
            0.0f64..=1.0,
            prop::bool::ANY,
            0usize..3,
        )
            .prop_map(|(sev, crit, urgency, rep, key)| {
                let mut a = alert(
                    "x",
                    sev,
                    if crit { Criticality::Critical } else { Criticality::NonCritical },
                    urgency,
                    if rep { DurationKind::Repeated } else { DurationKind::OneShot },
                );
                a.cluster_key = format!("src/k{key}");
                a
            })
    }

    proptest! {
        #[test]
        fn critical_alerts_are_never_held_back(
            alerts in prop::collection::vec(arb_alert(), 1..40),
            weights in prop::array::uniform3(prop::array::uniform6(-5.0f64..5.0)),
            eps in 0.0f64..=1.0,
            learned in prop::bool::ANY,
            interruptions in 0u32..30,
        ) {
            let mut f = Fixture::new();
            f.policy.weights = weights;
            f.policy.epsilon = eps;
            let mode = if learned { PolicyMode::Learned } else { PolicyMode::Baseline };
            let mut counts = BTreeMap::new();
            for (i, mut a) in alerts.into_iter().enumerate() {
                a.alert_id = format!("a{i}");
                let now = t0() + Duration::minutes(i as i64 * 7);
                let ctx = UserContext {
                    histogram: &f.hist,
                    prefs: &f.prefs,
                    interruptions_last_hour: interruptions,
                    max_defer: Duration::hours(24),
                    hold_until: None,
                };
                let d = f.triage.decide(&a, &ctx, &f.cfg.triage, mode, &mut f.policy, format!("dc-{i}"), now);
                if a.is_critical() {
                    prop_assert_eq!(&d.action, &TriageAction::Issue);
                    prop_assert_eq!(d.layer, Layer::Safeguard);
                }
                prop_assert!(d.trace.iter().any(|t| t.rule == "layer"));
                prop_assert!(d.feature_vector.iter().all(|v| (0.0..=1.0).contains(v)));
                *counts.entry(d.action.name()).or_insert(0usize) += 1;
                // At most one open window per (user, cluster).
                let mut seen = BTreeSet::new();
                for w in f.triage.open_windows() {
                    prop_assert!(seen.insert((w.user_id.clone(), w.cluster_key.clone())));
                }
            }
            // Conservation: every aggregated alert sits in exactly one window.
            let in_windows: usize = f.triage.windows().map(|w| w.member_alert_ids.len()).sum();
            prop_assert_eq!(in_windows, counts.get("aggregate").copied().unwrap_or(0));
        }
    }
}
