//! The gateway state machine. Every mutation is a [`Command`] carrying its
//! own timestamp, so replaying the same commands against the same starting
//! state reproduces the same state.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use chrono::Duration;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::alerts::{
    classify_alert, estimate_pending, generate_alert, recommend_rules, AlertDraft, AlertRule, Assignment,
    ClusterHistory, RuleError, RuleMatch, RuleOrigin,
};
use crate::availability::{AvailabilityHistogram, Preferences, PreferencesError};
use crate::config::{GatewayConfig, PolicyMode};
use crate::ingestion::{IngestError, RateTracker, WatcherKind};
use crate::learning::{reward_of, BanditAction, Outcome, PolicyState, RewardRecord};
use crate::model::{
    validate_event, Alert, Channel, DeliveryCycle, Event, FeedbackSignal, Layer, Notification, NotificationKind,
    Signal, TraceEntry, TriageAction, TriageDecision,
};
use crate::notifier::{
    notification_severity, render_text, schedule_dispatch, DispatchOutcome, DispatchPass, Notifier, Origin,
    OutboxEntry, Transport,
};
use crate::time::{day_index, Timestamp};
use crate::triage::{form_digest, Triage, UserContext};

/// Id of the implicit push watcher behind `POST /api/v1/events`.
pub const WEBHOOK_WATCHER: &str = "webhook";

/// A rule as submitted by a client; the id is assigned when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleInput {
    #[serde(default)]
    pub rule_id: Option<String>,
    pub user_id: String,
    #[serde(rename = "match", default)]
    pub matcher: RuleMatch,
    #[serde(default)]
    pub assign: Assignment,
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_origin")]
    pub created_by: RuleOrigin,
}

fn default_true() -> bool {
    true
}

fn default_origin() -> RuleOrigin {
    RuleOrigin::User
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    Ingest {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        watcher_id: Option<String>,
        event: Value,
        received_at: Timestamp,
    },
    Feedback {
        notification_id: String,
        signal: Signal,
        at: Timestamp,
        #[serde(default)]
        explicit: bool,
    },
    Ack {
        notification_id: String,
        at: Timestamp,
    },
    /// The user reports that a suppressed alert should have reached them.
    MissedAlert {
        decision_id: String,
        at: Timestamp,
    },
    CreateRule {
        rule: RuleInput,
    },
    UpdateRule {
        rule: RuleInput,
    },
    DeleteRule {
        rule_id: String,
    },
    SetPreferences {
        preferences: Preferences,
    },
    /// Installs daily event counts for a cluster, ending the day before `before`.
    SeedHistory {
        cluster_key: String,
        daily_counts: Vec<u32>,
        before: Timestamp,
    },
    Tick {
        now: Timestamp,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Feedback { .. } => "feedback",
            Command::Ack { .. } => "ack",
            Command::MissedAlert { .. } => "missed_alert",
            Command::CreateRule { .. } => "create_rule",
            Command::UpdateRule { .. } => "update_rule",
            Command::DeleteRule { .. } => "delete_rule",
            Command::SetPreferences { .. } => "set_preferences",
            Command::SeedHistory { .. } => "seed_history",
            Command::Tick { .. } => "tick",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("unknown notification {0}")]
    UnknownNotification(String),
    #[error("notification {0} has not been delivered yet")]
    NotDispatched(String),
    #[error("feedback at {at} precedes delivery of {notification_id}")]
    FeedbackBeforeDispatch { notification_id: String, at: String },
    #[error("notification {0} already has terminal feedback")]
    AlreadySettled(String),
    #[error("unknown decision {0}")]
    UnknownDecision(String),
    #[error("decision {0} did not suppress its alert")]
    NotSuppressed(String),
    #[error("a missed alert was already reported for decision {0}")]
    AlreadyReported(String),
    #[error("unknown rule {0}")]
    UnknownRule(String),
    #[error("rule {0} already exists")]
    DuplicateRule(String),
    #[error("update needs a rule_id")]
    MissingRuleId,
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Preferences(#[from] PreferencesError),
    #[error("cluster key must not be empty")]
    EmptyClusterKey,
}

/// Coarse error classes, mapped to HTTP statuses by the service.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Invalid,
    NotFound,
    Conflict,
}

impl GatewayError {
    pub fn class(&self) -> ErrorClass {
        match self {
            GatewayError::Ingest(IngestError::UnknownWatcher(_))
            | GatewayError::UnknownNotification(_)
            | GatewayError::UnknownDecision(_)
            | GatewayError::UnknownRule(_) => ErrorClass::NotFound,
            GatewayError::NotDispatched(_)
            | GatewayError::AlreadySettled(_)
            | GatewayError::AlreadyReported(_)
            | GatewayError::DuplicateRule(_)
            | GatewayError::Ingest(IngestError::DisabledWatcher(_)) => ErrorClass::Conflict,
            _ => ErrorClass::Invalid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertReceipt {
    pub alert_id: String,
    pub user_id: String,
    pub decision_id: String,
    pub action: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub notification_id: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickSummary {
    pub windows_flushed: u32,
    pub notifications_dispatched: u32,
    pub escalations: u32,
    pub feedback_settled: u32,
    pub policy_updates: u32,
    pub channel_errors: u32,
}

impl TickSummary {
    pub fn is_idle(&self) -> bool {
        *self == TickSummary::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Response {
    Ingested {
        event_id: String,
        alerts: Vec<AlertReceipt>,
    },
    Feedback {
        notification_id: String,
        policy_updates: u32,
    },
    Acknowledged {
        notification_id: String,
        acknowledged_at: Timestamp,
    },
    MissedAlert {
        decision_id: String,
        policy_updated: bool,
    },
    Rule(AlertRule),
    RuleDeleted {
        rule_id: String,
    },
    Preferences(Preferences),
    HistorySeeded {
        cluster_key: String,
        days: usize,
    },
    Tick(TickSummary),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub preferences: Preferences,
    pub histogram: AvailabilityHistogram,
    pub policy: PolicyState,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct IdCounters {
    event: u64,
    alert: u64,
    decision: u64,
    notification: u64,
    rule: u64,
}

fn next_id(counter: &mut u64, prefix: &str) -> String {
    *counter += 1;
    format!("{prefix}-{:08}", *counter)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Counters {
    events_ingested: u64,
    escalations: u64,
    channel_errors: u64,
    policy_updates: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gateway {
    config: GatewayConfig,
    now: Option<Timestamp>,
    ids: IdCounters,
    counters: Counters,
    rules: Vec<AlertRule>,
    rates: BTreeMap<String, RateTracker>,
    history: BTreeMap<String, ClusterHistory>,
    unmatched: VecDeque<Event>,
    alerts: BTreeMap<String, Alert>,
    decisions: BTreeMap<String, TriageDecision>,
    decision_of_alert: BTreeMap<String, String>,
    notification_of_alert: BTreeMap<String, String>,
    users: BTreeMap<String, UserProfile>,
    triage: Triage,
    notifier: Notifier,
    feedback: BTreeMap<String, FeedbackSignal>,
    ignored_due: BTreeSet<(Timestamp, String)>,
    suppress_due: BTreeSet<(Timestamp, String)>,
    settled: BTreeSet<String>,
    rewards: BTreeMap<String, RewardRecord>,
    complaints: BTreeSet<String>,
}

/// Diagnostics view of a user's policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyView {
    pub user_id: String,
    pub weights: BTreeMap<&'static str, Vec<f64>>,
    pub epsilon: f64,
    pub update_count: u64,
    pub learning_rate: f64,
}

/// A notification with its delivery history and feedback.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NotificationView {
    #[serde(flatten)]
    pub notification: Notification,
    pub severity: String,
    pub critical: bool,
    pub attempts: u32,
    pub feedback: Option<Signal>,
    pub dispatch_records: Vec<crate::notifier::DispatchRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GatewayMetrics {
    pub events_ingested: u64,
    pub unmatched_events_buffered: usize,
    pub alerts: u64,
    pub critical_alerts: u64,
    pub critical_dispatched_at_decision: u64,
    pub decisions_issue: u64,
    pub decisions_suppress: u64,
    pub decisions_aggregate: u64,
    pub decisions_by_layer: BTreeMap<String, u64>,
    pub open_windows: u64,
    pub digests: u64,
    pub digest_members: u64,
    pub notifications: u64,
    pub notifications_dispatched: u64,
    pub pending_dispatch: u64,
    pub escalations: u64,
    pub channel_errors: u64,
    pub feedback_by_signal: BTreeMap<String, u64>,
    pub negative_feedback: u64,
    pub policy_updates: u64,
    pub missed_alert_reports: u64,
    /// Events per second, per source.
    pub source_rates: BTreeMap<String, f64>,
}

/// The three terms of the triage conservation identity plus the alerts still
/// waiting in open windows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Conservation {
    pub alerts: u64,
    pub issued: u64,
    pub suppressed: u64,
    pub digest_members: u64,
    pub waiting_in_windows: u64,
}

impl Conservation {
    pub fn holds(&self) -> bool {
        self.issued + self.suppressed + self.digest_members + self.waiting_in_windows == self.alerts
    }
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> Self {
        Self {
            config,
            now: None,
            ids: IdCounters::default(),
            counters: Counters::default(),
            rules: Vec::new(),
            rates: BTreeMap::new(),
            history: BTreeMap::new(),
            unmatched: VecDeque::new(),
            alerts: BTreeMap::new(),
            decisions: BTreeMap::new(),
            decision_of_alert: BTreeMap::new(),
            notification_of_alert: BTreeMap::new(),
            users: BTreeMap::new(),
            triage: Triage::default(),
            notifier: Notifier::default(),
            feedback: BTreeMap::new(),
            ignored_due: BTreeSet::new(),
            suppress_due: BTreeSet::new(),
            settled: BTreeSet::new(),
            rewards: BTreeMap::new(),
            complaints: BTreeSet::new(),
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Replaces the configuration, e.g. after loading a snapshot.
    pub fn set_config(&mut self, config: GatewayConfig) {
        self.config = config;
    }

    pub fn now(&self) -> Option<Timestamp> {
        self.now
    }

    fn advance(&mut self, t: Timestamp) -> Timestamp {
        let now = self.now.map_or(t, |n| n.max(t));
        self.now = Some(now);
        now
    }

    /// Earliest instant at which a tick would do something.
    pub fn next_due(&self) -> Option<Timestamp> {
        [
            self.triage.next_deadline(),
            self.notifier.next_due(),
            self.ignored_due.first().map(|e| e.0),
            self.suppress_due.first().map(|e| e.0),
        ]
        .into_iter()
        .flatten()
        .min()
    }

    /// Checks a command against the current state without changing it.
    /// A command that passes will execute without error.
    pub fn validate(&self, cmd: &Command) -> Result<(), GatewayError> {
        match cmd {
            Command::Ingest {
                watcher_id,
                event,
                received_at,
            } => {
                self.check_watcher(watcher_id.as_deref())?;
                validate_event(event, "", *received_at).map_err(IngestError::from)?;
                Ok(())
            }
            Command::Feedback {
                notification_id, at, ..
            } => {
                let n = self
                    .notifier
                    .notification(notification_id)
                    .ok_or_else(|| GatewayError::UnknownNotification(notification_id.clone()))?;
                let sent = n
                    .dispatched_at
                    .ok_or_else(|| GatewayError::NotDispatched(notification_id.clone()))?;
                if *at < sent {
                    return Err(GatewayError::FeedbackBeforeDispatch {
                        notification_id: notification_id.clone(),
                        at: crate::time::format_rfc3339(*at),
                    });
                }
                if self.feedback.contains_key(notification_id) {
                    return Err(GatewayError::AlreadySettled(notification_id.clone()));
                }
                Ok(())
            }
            Command::Ack { notification_id, .. } => {
                let n = self
                    .notifier
                    .notification(notification_id)
                    .ok_or_else(|| GatewayError::UnknownNotification(notification_id.clone()))?;
                if n.dispatched_at.is_none() {
                    return Err(GatewayError::NotDispatched(notification_id.clone()));
                }
                Ok(())
            }
            Command::MissedAlert { decision_id, .. } => {
                let d = self
                    .decisions
                    .get(decision_id)
                    .ok_or_else(|| GatewayError::UnknownDecision(decision_id.clone()))?;
                if d.action != TriageAction::Suppress {
                    return Err(GatewayError::NotSuppressed(decision_id.clone()));
                }
                if self.complaints.contains(decision_id) {
                    return Err(GatewayError::AlreadyReported(decision_id.clone()));
                }
                Ok(())
            }
            Command::CreateRule { rule } => {
                if let Some(id) = &rule.rule_id {
                    if self.rules.iter().any(|r| &r.rule_id == id) {
                        return Err(GatewayError::DuplicateRule(id.clone()));
                    }
                }
                self.materialize_rule(rule, "ru-pending".into()).validate()?;
                Ok(())
            }
            Command::UpdateRule { rule } => {
                let id = rule.rule_id.as_ref().ok_or(GatewayError::MissingRuleId)?;
                if !self.rules.iter().any(|r| &r.rule_id == id) {
                    return Err(GatewayError::UnknownRule(id.clone()));
                }
                self.materialize_rule(rule, id.clone()).validate()?;
                Ok(())
            }
            Command::DeleteRule { rule_id } => {
                if !self.rules.iter().any(|r| &r.rule_id == rule_id) {
                    return Err(GatewayError::UnknownRule(rule_id.clone()));
                }
                Ok(())
            }
            Command::SetPreferences { preferences } => {
                preferences.validate()?;
                Ok(())
            }
            Command::SeedHistory { cluster_key, .. } => {
                if cluster_key.trim().is_empty() {
                    return Err(GatewayError::EmptyClusterKey);
                }
                Ok(())
            }
            Command::Tick { .. } => Ok(()),
        }
    }

    fn check_watcher(&self, watcher_id: Option<&str>) -> Result<(), IngestError> {
        let id = watcher_id.unwrap_or(WEBHOOK_WATCHER);
        match self.config.watchers.iter().find(|w| w.watcher_id == id) {
            Some(w) if !w.enabled => Err(IngestError::DisabledWatcher(id.to_string())),
            Some(_) => Ok(()),
            None if id == WEBHOOK_WATCHER => Ok(()),
            None => Err(IngestError::UnknownWatcher(id.to_string())),
        }
    }

    fn materialize_rule(&self, input: &RuleInput, rule_id: String) -> AlertRule {
        AlertRule {
            rule_id,
            user_id: input.user_id.clone(),
            matcher: input.matcher.clone(),
            assign: input.assign.clone(),
            enabled: input.enabled,
            created_by: input.created_by,
        }
    }

    /// Validates then applies a command.
    pub fn execute(&mut self, cmd: &Command, transport: &mut dyn Transport) -> Result<Response, GatewayError> {
        self.validate(cmd)?;
        Ok(match cmd {
            Command::Ingest {
                watcher_id: _,
                event,
                received_at,
            } => self.ingest(event, *received_at, transport),
            Command::Feedback {
                notification_id,
                signal,
                at,
                explicit,
            } => {
                self.advance(*at);
                let updates = self.apply_feedback(FeedbackSignal {
                    notification_id: notification_id.clone(),
                    signal: *signal,
                    observed_at: *at,
                    explicit: *explicit,
                });
                Response::Feedback {
                    notification_id: notification_id.clone(),
                    policy_updates: updates,
                }
            }
            Command::Ack { notification_id, at } => {
                self.advance(*at);
                self.notifier
                    .acknowledge(notification_id, *at)
                    .expect("validated notification");
                Response::Acknowledged {
                    notification_id: notification_id.clone(),
                    acknowledged_at: self.notifier.notification(notification_id).and_then(|n| n.acknowledged_at).unwrap_or(*at),
                }
            }
            Command::MissedAlert { decision_id, at } => {
                self.advance(*at);
                self.complaints.insert(decision_id.clone());
                let d = &self.decisions[decision_id];
                let learned = d.layer == Layer::Learned && !self.settled.contains(decision_id);
                if learned {
                    let due = self.learned_suppress_due(decision_id);
                    self.suppress_due.remove(&(due, decision_id.clone()));
                    self.learn(decision_id, Outcome::SuppressComplaint, *at);
                }
                Response::MissedAlert {
                    decision_id: decision_id.clone(),
                    policy_updated: learned,
                }
            }
            Command::CreateRule { rule } => {
                let id = rule.rule_id.clone().unwrap_or_else(|| next_id(&mut self.ids.rule, "ru"));
                let rule = self.materialize_rule(rule, id);
                self.ensure_user(&rule.user_id);
                self.rules.push(rule.clone());
                Response::Rule(rule)
            }
            Command::UpdateRule { rule } => {
                let id = rule.rule_id.clone().expect("validated rule id");
                let rule = self.materialize_rule(rule, id.clone());
                self.ensure_user(&rule.user_id);
                let slot = self.rules.iter_mut().find(|r| r.rule_id == id).expect("validated rule");
                *slot = rule.clone();
                Response::Rule(rule)
            }
            Command::DeleteRule { rule_id } => {
                self.rules.retain(|r| &r.rule_id != rule_id);
                Response::RuleDeleted { rule_id: rule_id.clone() }
            }
            Command::SetPreferences { preferences } => {
                self.ensure_user(&preferences.user_id);
                let profile = self.users.get_mut(&preferences.user_id).expect("ensured");
                profile.preferences = preferences.clone();
                profile.histogram.timezone_offset_minutes = preferences.timezone_offset_minutes;
                Response::Preferences(preferences.clone())
            }
            Command::SeedHistory {
                cluster_key,
                daily_counts,
                before,
            } => {
                self.history
                    .entry(cluster_key.clone())
                    .or_default()
                    .seed(daily_counts, day_index(*before));
                Response::HistorySeeded {
                    cluster_key: cluster_key.clone(),
                    days: daily_counts.len(),
                }
            }
            Command::Tick { now } => Response::Tick(self.tick(*now, transport)),
        })
    }

    fn ensure_user(&mut self, user_id: &str) {
        if !self.users.contains_key(user_id) {
            let profile = UserProfile {
                preferences: Preferences::defaults(user_id, &self.config.users),
                histogram: AvailabilityHistogram::new(user_id, 0),
                policy: PolicyState::from_config(user_id, &self.config.learning),
            };
            self.users.insert(user_id.to_string(), profile);
        }
    }

    fn ingest(&mut self, raw: &Value, received_at: Timestamp, transport: &mut dyn Transport) -> Response {
        let now = self.advance(received_at);
        let event_id = next_id(&mut self.ids.event, "ev");
        let event = validate_event(raw, event_id.clone(), received_at).expect("validated event");
        self.counters.events_ingested += 1;

        let window = crate::time::secs(self.config.ingestion.rate_window_secs);
        let beta = self.config.ingestion.rate_beta;
        self.rates
            .entry(event.source_id.clone())
            .or_insert_with(|| RateTracker::new(event.source_id.clone(), beta, received_at))
            .observe(received_at, window);
        self.history
            .entry(event.cluster_key())
            .or_default()
            .record(day_index(received_at));

        let owners: BTreeSet<&str> = self.rules.iter().map(|r| r.user_id.as_str()).collect();
        let drafts: Vec<AlertDraft> = owners
            .into_iter()
            .filter_map(|user| generate_alert(&event, self.rules.iter().filter(|r| r.user_id == user)))
            .collect();

        if drafts.is_empty() {
            self.unmatched.push_back(event);
            while self.unmatched.len() > self.config.alerts.unmatched_capacity {
                self.unmatched.pop_front();
            }
        }

        let mut receipts = Vec::new();
        let mut safeguard = false;
        for draft in drafts {
            let receipt = self.process_alert(draft, now);
            safeguard |= self.decisions[&receipt.decision_id].layer == Layer::Safeguard;
            receipts.push(receipt);
        }
        if safeguard {
            let mut summary = TickSummary::default();
            self.run_dispatch(now, transport, &mut summary);
        }
        Response::Ingested {
            event_id,
            alerts: receipts,
        }
    }

    fn hold_until(&self, alert: &Alert, now: Timestamp) -> Option<Timestamp> {
        let due = alert.due_at?;
        let history = self
            .history
            .get(&alert.cluster_key)
            .map(|h| h.trailing(day_index(now), self.config.alerts.history_days))
            .unwrap_or_default();
        let estimate = estimate_pending(&history, due, now);
        let hold = due - self.config.triage.deadline_lead();
        (estimate.expected >= 1 && hold > now).then_some(hold)
    }

    fn process_alert(&mut self, draft: AlertDraft, now: Timestamp) -> AlertReceipt {
        let rule_id = draft.rule_id.clone();
        let alert_id = next_id(&mut self.ids.alert, "al");
        let classified = classify_alert(draft, &self.config.alerts.taxonomy, alert_id);
        let alert = classified.alert;
        self.ensure_user(&alert.user_id);
        let hold_until = self.hold_until(&alert, now);
        let interruptions = self.notifier.interruptions_last_hour(&alert.user_id, now);
        let decision_id = next_id(&mut self.ids.decision, "dc");

        let profile = self.users.get_mut(&alert.user_id).expect("ensured");
        let ctx = UserContext {
            histogram: &profile.histogram,
            prefs: &profile.preferences,
            interruptions_last_hour: interruptions,
            max_defer: self.config.users.max_defer(),
            hold_until,
        };
        let mut decision = self.triage.decide(
            &alert,
            &ctx,
            &self.config.triage,
            self.config.triage.policy_mode,
            &mut profile.policy,
            decision_id.clone(),
            now,
        );
        decision.trace.push(TraceEntry::new("rule", rule_id));
        if let Some(note) = classified.note {
            decision.trace.push(TraceEntry::new("classification", note));
        }
        if let Some(hold) = hold_until {
            if matches!(decision.action, TriageAction::Aggregate { .. }) {
                decision.trace.push(TraceEntry::new(
                    "due_date",
                    format!("more alerts expected before the due date; held until {}", crate::time::format_rfc3339(hold)),
                ));
            }
        }

        let mut notification_id = None;
        match &decision.action {
            TriageAction::Issue => {
                let origin = if decision.layer == Layer::Safeguard {
                    Origin::Safeguard
                } else {
                    Origin::Single
                };
                let scheduled_at = schedule_dispatch(
                    origin,
                    &profile.histogram,
                    &profile.preferences,
                    now,
                    self.config.users.max_defer(),
                );
                let kind = NotificationKind::Single {
                    alert_id: alert.alert_id.clone(),
                };
                let id = next_id(&mut self.ids.notification, "nt");
                let n = Notification {
                    notification_id: id.clone(),
                    user_id: alert.user_id.clone(),
                    body: render_text(&kind, &[&alert]),
                    kind,
                    channel: profile.preferences.preferred_channel(0),
                    cycle: DeliveryCycle::Aperiodic,
                    scheduled_at,
                    dispatched_at: None,
                    acknowledged_at: None,
                };
                self.notifier.enqueue(n, alert.is_critical(), alert.severity);
                self.notification_of_alert.insert(alert.alert_id.clone(), id.clone());
                notification_id = Some(id);
            }
            TriageAction::Suppress => {
                if decision.layer == Layer::Learned {
                    self.suppress_due
                        .insert((now + self.config.learning.ignored_ttl(), decision_id.clone()));
                }
            }
            TriageAction::Aggregate { .. } => {}
        }

        let receipt = AlertReceipt {
            alert_id: alert.alert_id.clone(),
            user_id: alert.user_id.clone(),
            decision_id: decision_id.clone(),
            action: decision.action.name().to_string(),
            notification_id,
        };
        self.decision_of_alert.insert(alert.alert_id.clone(), decision_id.clone());
        self.alerts.insert(alert.alert_id.clone(), alert);
        self.decisions.insert(decision_id, decision);
        receipt
    }

    fn learned_suppress_due(&self, decision_id: &str) -> Timestamp {
        self.decisions[decision_id].decided_at + self.config.learning.ignored_ttl()
    }

    fn run_dispatch(&mut self, now: Timestamp, transport: &mut dyn Transport, summary: &mut TickSummary) {
        let users = &self.users;
        let defaults = &self.config.users;
        let lookup = |u: &str| {
            users
                .get(u)
                .map(|p| p.preferences.clone())
                .unwrap_or_else(|| Preferences::defaults(u, defaults))
        };
        let pass = self.notifier.dispatch_due(now, &lookup, &self.config.notifier, transport);
        let esc = self
            .notifier
            .escalate_unacknowledged(now, &lookup, &self.config.notifier, transport);
        summary.escalations += esc.records.len() as u32;
        self.counters.escalations += esc.records.len() as u64;
        for p in [pass, esc] {
            self.after_pass(&p, summary);
        }
    }

    fn after_pass(&mut self, pass: &DispatchPass, summary: &mut TickSummary) {
        let ttl = self.config.learning.ignored_ttl();
        for id in &pass.first_deliveries {
            let sent = self
                .notifier
                .notification(id)
                .and_then(|n| n.dispatched_at)
                .expect("delivered");
            self.ignored_due.insert((sent + ttl, id.clone()));
        }
        summary.notifications_dispatched += pass.first_deliveries.len() as u32;
        let errors = pass
            .records
            .iter()
            .filter(|r| matches!(r.outcome, DispatchOutcome::ChannelError { .. }))
            .count();
        summary.channel_errors += errors as u32;
        self.counters.channel_errors += errors as u64;
    }

    /// Flush due windows, dispatch, escalate, then settle expired feedback.
    fn tick(&mut self, now: Timestamp, transport: &mut dyn Transport) -> TickSummary {
        let now = self.advance(now);
        let mut summary = TickSummary::default();

        for window in self.triage.flush_due_windows(now) {
            summary.windows_flushed += 1;
            let profile = self.users.get(&window.user_id).expect("window owner exists");
            let channel = profile.preferences.preferred_channel(0);
            let id = format!("nt-{:08}", self.ids.notification + 1);
            let Ok(mut n) = form_digest(&window, &self.alerts, id.clone(), channel, now) else {
                continue;
            };
            self.ids.notification += 1;
            n.scheduled_at = schedule_dispatch(
                Origin::Digest {
                    deadline: window.deadline,
                },
                &profile.histogram,
                &profile.preferences,
                now,
                self.config.users.max_defer(),
            );
            let severity = notification_severity(&n, &self.alerts);
            for alert_id in n.kind.alert_ids() {
                self.notification_of_alert.insert(alert_id.to_string(), id.clone());
            }
            self.notifier.enqueue(n, false, severity);
        }

        self.run_dispatch(now, transport, &mut summary);

        while let Some((due, id)) = self.ignored_due.first().cloned() {
            if due > now {
                break;
            }
            self.ignored_due.pop_first();
            if self.feedback.contains_key(&id) {
                continue;
            }
            summary.feedback_settled += 1;
            summary.policy_updates += self.apply_feedback(FeedbackSignal {
                notification_id: id,
                signal: Signal::Ignored,
                observed_at: due,
                explicit: false,
            });
        }

        while let Some((due, decision_id)) = self.suppress_due.first().cloned() {
            if due > now {
                break;
            }
            self.suppress_due.pop_first();
            if self.settled.contains(&decision_id) {
                continue;
            }
            summary.feedback_settled += 1;
            summary.policy_updates += 1;
            self.learn(&decision_id, Outcome::SuppressQuiet, due);
        }

        summary
    }

    fn apply_feedback(&mut self, fb: FeedbackSignal) -> u32 {
        let n = self
            .notifier
            .notification(&fb.notification_id)
            .cloned()
            .expect("validated notification");
        let sent = n.dispatched_at.expect("validated delivery");
        self.notifier
            .record_feedback(&fb.notification_id, fb.signal, fb.observed_at)
            .expect("known notification");
        if let Some(profile) = self.users.get_mut(&n.user_id) {
            profile.histogram.record_engagement(fb.signal, sent);
        }
        self.ignored_due
            .remove(&(sent + self.config.learning.ignored_ttl(), fb.notification_id.clone()));

        let mut updates = 0;
        for alert_id in n.kind.alert_ids() {
            let Some(decision_id) = self.decision_of_alert.get(alert_id).cloned() else {
                continue;
            };
            if self.decisions[&decision_id].layer == Layer::Learned && !self.settled.contains(&decision_id) {
                self.learn(&decision_id, Outcome::Feedback(fb.signal), fb.observed_at);
                updates += 1;
            }
        }
        self.feedback.insert(fb.notification_id.clone(), fb);
        updates
    }

    fn learn(&mut self, decision_id: &str, outcome: Outcome, at: Timestamp) {
        let d = &self.decisions[decision_id];
        let action = match d.action {
            TriageAction::Issue => BanditAction::Issue,
            TriageAction::Aggregate { .. } => BanditAction::Aggregate,
            TriageAction::Suppress => BanditAction::Suppress,
        };
        let record = RewardRecord {
            decision_id: decision_id.to_string(),
            action,
            features: d.feature_vector.clone(),
            reward: reward_of(&self.config.learning.rewards, outcome),
            settled_at: at,
        };
        let profile = self.users.get_mut(&d.user_id).expect("decision owner exists");
        if profile.policy.update_policy(&record).is_ok() {
            self.counters.policy_updates += 1;
        }
        self.settled.insert(decision_id.to_string());
        self.rewards.insert(decision_id.to_string(), record);
    }

    // Queries.

    pub fn alert(&self, id: &str) -> Option<&Alert> {
        self.alerts.get(id)
    }

    pub fn alerts(&self) -> impl Iterator<Item = &Alert> {
        self.alerts.values()
    }

    pub fn decision(&self, id: &str) -> Option<&TriageDecision> {
        self.decisions.get(id)
    }

    pub fn decisions(&self) -> impl Iterator<Item = &TriageDecision> {
        self.decisions.values()
    }

    pub fn decision_for_alert(&self, alert_id: &str) -> Option<&TriageDecision> {
        self.decision_of_alert.get(alert_id).and_then(|id| self.decisions.get(id))
    }

    pub fn notification_for_alert(&self, alert_id: &str) -> Option<&Notification> {
        self.notification_of_alert
            .get(alert_id)
            .and_then(|id| self.notifier.notification(id))
    }

    pub fn decisions_for_user(&self, user_id: &str, since: Option<Timestamp>) -> Vec<&TriageDecision> {
        self.decisions
            .values()
            .filter(|d| d.user_id == user_id && since.is_none_or(|s| d.decided_at >= s))
            .collect()
    }

    pub fn notification(&self, id: &str) -> Option<&Notification> {
        self.notifier.notification(id)
    }

    pub fn notifications(&self) -> impl Iterator<Item = &Notification> {
        self.notifier.notifications()
    }

    pub fn notification_view(&self, n: &Notification) -> NotificationView {
        let status = self.notifier.status(&n.notification_id);
        NotificationView {
            notification: n.clone(),
            severity: status.map(|s| s.severity.as_str()).unwrap_or_default().to_string(),
            critical: status.is_some_and(|s| s.critical),
            attempts: status.map_or(0, |s| s.attempts),
            feedback: self.feedback.get(&n.notification_id).map(|f| f.signal),
            dispatch_records: self.notifier.records(&n.notification_id).to_vec(),
        }
    }

    pub fn feedback_for(&self, notification_id: &str) -> Option<&FeedbackSignal> {
        self.feedback.get(notification_id)
    }

    pub fn outbox(&self) -> &[OutboxEntry] {
        self.notifier.outbox()
    }

    pub fn interruptions_last_hour(&self, user_id: &str, now: Timestamp) -> u32 {
        self.notifier.interruptions_last_hour(user_id, now)
    }

    pub fn triage(&self) -> &Triage {
        &self.triage
    }

    pub fn rules(&self) -> &[AlertRule] {
        &self.rules
    }

    pub fn rule(&self, id: &str) -> Option<&AlertRule> {
        self.rules.iter().find(|r| r.rule_id == id)
    }

    pub fn user_ids(&self) -> impl Iterator<Item = &String> {
        self.users.keys()
    }

    pub fn profile(&self, user_id: &str) -> Option<&UserProfile> {
        self.users.get(user_id)
    }

    pub fn preferences(&self, user_id: &str) -> Preferences {
        self.users
            .get(user_id)
            .map(|p| p.preferences.clone())
            .unwrap_or_else(|| Preferences::defaults(user_id, &self.config.users))
    }

    pub fn availability(&self, user_id: &str) -> Vec<f64> {
        self.users
            .get(user_id)
            .map(|p| p.histogram.scores())
            .unwrap_or_else(|| AvailabilityHistogram::new(user_id, 0).scores())
    }

    pub fn policy(&self, user_id: &str) -> PolicyView {
        let fresh;
        let state = match self.users.get(user_id) {
            Some(p) => &p.policy,
            None => {
                fresh = PolicyState::from_config(user_id, &self.config.learning);
                &fresh
            }
        };
        PolicyView {
            user_id: user_id.to_string(),
            weights: BanditAction::ALL
                .iter()
                .map(|a| (a.as_str(), state.weights[a.index()].to_vec()))
                .collect(),
            epsilon: state.epsilon,
            update_count: state.update_count,
            learning_rate: state.learning_rate,
        }
    }

    pub fn reward(&self, decision_id: &str) -> Option<&RewardRecord> {
        self.rewards.get(decision_id)
    }

    /// Disabled candidate rules for recurring events nobody's rules match.
    pub fn recommendations(&self, user_id: &str) -> Vec<AlertRule> {
        recommend_rules(
            user_id,
            &self.unmatched,
            self.config.alerts.min_support,
            &self.config.alerts.taxonomy,
        )
        .into_iter()
        .filter(|c| self.rule(&c.rule_id).is_none())
        .collect()
    }

    /// Rate estimates and the poll interval each would imply.
    pub fn source_rates(&self) -> BTreeMap<String, f64> {
        self.rates
            .iter()
            .map(|(k, v)| (k.clone(), v.estimate.ewma_rate))
            .collect()
    }

    pub fn watcher_kinds(&self) -> Vec<(String, WatcherKind)> {
        self.config
            .watchers
            .iter()
            .map(|w| (w.watcher_id.clone(), w.kind.clone()))
            .collect()
    }

    pub fn conservation(&self) -> Conservation {
        let mut c = Conservation {
            alerts: self.alerts.len() as u64,
            ..Conservation::default()
        };
        for d in self.decisions.values() {
            match d.action {
                TriageAction::Issue => c.issued += 1,
                TriageAction::Suppress => c.suppressed += 1,
                TriageAction::Aggregate { .. } => {}
            }
        }
        for n in self.notifier.notifications() {
            if let NotificationKind::Digest { alert_ids, .. } = &n.kind {
                c.digest_members += alert_ids.len() as u64;
            }
        }
        c.waiting_in_windows = self
            .triage
            .open_windows()
            .map(|w| w.member_alert_ids.len() as u64)
            .sum();
        c
    }

    pub fn metrics(&self) -> GatewayMetrics {
        let mut m = GatewayMetrics {
            events_ingested: self.counters.events_ingested,
            unmatched_events_buffered: self.unmatched.len(),
            alerts: self.alerts.len() as u64,
            escalations: self.counters.escalations,
            channel_errors: self.counters.channel_errors,
            policy_updates: self.counters.policy_updates,
            missed_alert_reports: self.complaints.len() as u64,
            pending_dispatch: self.notifier.pending_count() as u64,
            open_windows: self.triage.open_windows().count() as u64,
            source_rates: self.source_rates(),
            ..GatewayMetrics::default()
        };
        for d in self.decisions.values() {
            match d.action {
                TriageAction::Issue => m.decisions_issue += 1,
                TriageAction::Suppress => m.decisions_suppress += 1,
                TriageAction::Aggregate { .. } => m.decisions_aggregate += 1,
            }
            let layer = serde_json::to_value(d.layer).ok().and_then(|v| v.as_str().map(str::to_string));
            *m.decisions_by_layer.entry(layer.unwrap_or_default()).or_default() += 1;
        }
        for a in self.alerts.values().filter(|a| a.is_critical()) {
            m.critical_alerts += 1;
            let on_time = match (self.decision_for_alert(&a.alert_id), self.notification_for_alert(&a.alert_id)) {
                (Some(d), Some(n)) => n.dispatched_at == Some(d.decided_at),
                _ => false,
            };
            if on_time {
                m.critical_dispatched_at_decision += 1;
            }
        }
        for n in self.notifier.notifications() {
            m.notifications += 1;
            if n.dispatched_at.is_some() {
                m.notifications_dispatched += 1;
            }
            if let NotificationKind::Digest { alert_ids, .. } = &n.kind {
                m.digests += 1;
                m.digest_members += alert_ids.len() as u64;
            }
        }
        for fb in self.feedback.values() {
            *m.feedback_by_signal.entry(fb.signal.as_str().to_string()).or_default() += 1;
            if fb.signal.is_negative() {
                m.negative_feedback += 1;
            }
        }
        m
    }

    /// Duration until an undelivered feedback is synthesized as ignored.
    pub fn ignored_ttl(&self) -> Duration {
        self.config.learning.ignored_ttl()
    }

    pub fn policy_mode(&self) -> PolicyMode {
        self.config.triage.policy_mode
    }

    /// Channel a user's first attempt would use.
    pub fn primary_channel(&self, user_id: &str) -> Channel {
        self.preferences(user_id).preferred_channel(0)
    }
}
