//! Scripted scenarios: extra users, rules, history and events on top of a
//! workload, plus assertions checked against the final gateway state.

use notigate_core::availability::Preferences;
use notigate_core::config::PolicyMode;
use notigate_core::gateway::{Gateway, RuleInput};
use notigate_core::model::{Notification, NotificationKind, TriageAction};
use notigate_core::time::Timestamp;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::report::{ratio, AssertionResult};
use crate::users::SyntheticUser;
use crate::workload::SourceSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistorySeed {
    pub cluster_key: String,
    pub daily_counts: Vec<u32>,
    /// Defaults to the simulation start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub before: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedEvent {
    pub at: Timestamp,
    pub event: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cmp {
    Eq,
    Ge,
    Le,
    Gt,
    Lt,
}

impl Cmp {
    pub fn check(self, actual: f64, expected: f64) -> bool {
        match self {
            Cmp::Eq => (actual - expected).abs() < 1e-9,
            Cmp::Ge => actual >= expected,
            Cmp::Le => actual <= expected,
            Cmp::Gt => actual > expected,
            Cmp::Lt => actual < expected,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Cmp::Eq => "==",
            Cmp::Ge => ">=",
            Cmp::Le => "<=",
            Cmp::Gt => ">",
            Cmp::Lt => "<",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindFilter {
    Single,
    Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Assertion {
    /// Dispatched notifications matching the filters.
    NotificationCount {
        name: String,
        #[serde(default)]
        user: Option<String>,
        #[serde(default)]
        cluster: Option<String>,
        #[serde(default)]
        notification: Option<KindFilter>,
        #[serde(default)]
        dispatched_before: Option<Timestamp>,
        #[serde(default)]
        dispatched_from: Option<Timestamp>,
        op: Cmp,
        value: u64,
    },
    /// Every alert of the cluster went out in one digest before `before`.
    SingleDigest {
        name: String,
        user: String,
        cluster: String,
        alerts: u64,
        before: Timestamp,
    },
    /// Share of non-critical first deliveries in `[from, to)` that landed in
    /// the synthetic user's active hours.
    ActiveWindowFraction {
        name: String,
        user: String,
        from: Timestamp,
        to: Timestamp,
        op: Cmp,
        value: f64,
    },
    MissedCriticalRate {
        name: String,
        op: Cmp,
        value: f64,
    },
    Conservation {
        name: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<PolicyMode>,
    /// Simulated days; the longer of this and the workload duration is used.
    #[serde(default)]
    pub duration: f64,
    #[serde(default)]
    pub sources: Vec<SourceSpec>,
    #[serde(default)]
    pub users: Vec<SyntheticUser>,
    #[serde(default)]
    pub preferences: Vec<Preferences>,
    #[serde(default)]
    pub rules: Vec<RuleInput>,
    #[serde(default)]
    pub history: Vec<HistorySeed>,
    #[serde(default)]
    pub events: Vec<ScriptedEvent>,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

fn in_cluster(gw: &Gateway, n: &Notification, cluster: &str) -> bool {
    n.kind
        .alert_ids()
        .iter()
        .any(|id| gw.alert(id).is_some_and(|a| a.cluster_key == cluster))
}

fn kind_matches(n: &Notification, k: KindFilter) -> bool {
    matches!(
        (&n.kind, k),
        (NotificationKind::Single { .. }, KindFilter::Single) | (NotificationKind::Digest { .. }, KindFilter::Digest)
    )
}

/// Critical alerts not sent at the moment they were decided.
pub fn missed_critical(gw: &Gateway) -> (u64, u64) {
    let mut total = 0;
    let mut missed = 0;
    for a in gw.alerts().filter(|a| a.is_critical()) {
        total += 1;
        let on_time = gw.decision_for_alert(&a.alert_id).is_some_and(|d| {
            d.action == TriageAction::Issue
                && gw
                    .notification_for_alert(&a.alert_id)
                    .and_then(|n| n.dispatched_at)
                    .is_some_and(|t| t == d.decided_at)
        });
        if !on_time {
            missed += 1;
        }
    }
    (missed, total)
}

/// First deliveries of non-critical notifications to `user` in `[from, to)`:
/// (inside active hours, total).
pub fn active_window_hits(gw: &Gateway, user: &SyntheticUser, from: Timestamp, to: Timestamp) -> (u64, u64) {
    let mut hits = 0;
    let mut total = 0;
    for n in gw.notifications().filter(|n| n.user_id == user.user_id) {
        let Some(t) = n.dispatched_at else { continue };
        if t < from || t >= to {
            continue;
        }
        let critical = n
            .kind
            .alert_ids()
            .iter()
            .any(|id| gw.alert(id).is_some_and(|a| a.is_critical()));
        if critical {
            continue;
        }
        total += 1;
        if user.is_active(t) {
            hits += 1;
        }
    }
    (hits, total)
}

impl Assertion {
    pub fn name(&self) -> &str {
        match self {
            Assertion::NotificationCount { name, .. }
            | Assertion::SingleDigest { name, .. }
            | Assertion::ActiveWindowFraction { name, .. }
            | Assertion::MissedCriticalRate { name, .. }
            | Assertion::Conservation { name } => name,
        }
    }

    pub fn evaluate(&self, gw: &Gateway, users: &[SyntheticUser]) -> AssertionResult {
        let (passed, detail) = match self {
            Assertion::NotificationCount {
                user,
                cluster,
                notification,
                dispatched_before,
                dispatched_from,
                op,
                value,
                ..
            } => {
                let count = gw
                    .notifications()
                    .filter(|n| {
                        let Some(t) = n.dispatched_at else { return false };
                        user.as_ref().is_none_or(|u| &n.user_id == u)
                            && cluster.as_ref().is_none_or(|c| in_cluster(gw, n, c))
                            && notification.is_none_or(|k| kind_matches(n, k))
                            && dispatched_before.is_none_or(|b| t < b)
                            && dispatched_from.is_none_or(|f| t >= f)
                    })
                    .count() as u64;
                (op.check(count as f64, *value as f64), format!("count {count} {} {value}", op.symbol()))
            }
            Assertion::SingleDigest {
                user,
                cluster,
                alerts,
                before,
                ..
            } => {
                let hits: Vec<&Notification> = gw
                    .notifications()
                    .filter(|n| &n.user_id == user && in_cluster(gw, n, cluster))
                    .collect();
                match hits.as_slice() {
                    [n] => {
                        let members = n.kind.alert_ids().len() as u64;
                        let digest = matches!(n.kind, NotificationKind::Digest { .. });
                        let in_time = n.dispatched_at.is_some_and(|t| t < *before);
                        (
                            digest && members == *alerts && in_time,
                            format!(
                                "{} with {members} alerts dispatched at {:?}",
                                if digest { "digest" } else { "single" },
                                n.dispatched_at
                            ),
                        )
                    }
                    other => (false, format!("{} notifications carry the cluster", other.len())),
                }
            }
            Assertion::ActiveWindowFraction {
                user, from, to, op, value, ..
            } => match users.iter().find(|u| &u.user_id == user) {
                Some(u) => {
                    let (hits, total) = active_window_hits(gw, u, *from, *to);
                    let f = ratio(hits, total);
                    (total > 0 && op.check(f, *value), format!("{hits}/{total} = {f:.4} {} {value}", op.symbol()))
                }
                None => (false, format!("no synthetic user `{user}`")),
            },
            Assertion::MissedCriticalRate { op, value, .. } => {
                let (missed, total) = missed_critical(gw);
                let r = ratio(missed, total);
                (op.check(r, *value), format!("{missed}/{total} = {r:.4} {} {value}", op.symbol()))
            }
            Assertion::Conservation { .. } => {
                let c = gw.conservation();
                (
                    c.holds(),
                    format!(
                        "{} issued + {} suppressed + {} in digests + {} waiting vs {} alerts",
                        c.issued, c.suppressed, c.digest_members, c.waiting_in_windows, c.alerts
                    ),
                )
            }
        };
        AssertionResult {
            name: self.name().to_string(),
            passed,
            detail,
        }
    }
}
