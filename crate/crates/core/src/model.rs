//! Shared domain vocabulary: events, alerts, decisions, notifications and
//! feedback, plus the alert taxonomy orderings.
//!
//! All types here are plain values. Once constructed they are never mutated
//! in place by another component; owners replace them wholesale.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::time::{parse_rfc3339, Timestamp};

/// Event severity. Declaration order gives `NotAvailable < Info < Warning < Error`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    NotAvailable,
    Info,
    Warning,
    Error,
}

impl Severity {
    pub const ALL: [Severity; 4] = [
        Severity::Error,
        Severity::Warning,
        Severity::Info,
        Severity::NotAvailable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Error => "error",
            Severity::Warning => "warning",
            Severity::Info => "info",
            Severity::NotAvailable => "not_available",
        }
    }

    /// Label used in rendered notification text.
    pub fn label(self) -> &'static str {
        match self {
            Severity::Error => "ERROR",
            Severity::Warning => "WARNING",
            Severity::Info => "INFO",
            Severity::NotAvailable => "N/A",
        }
    }
}

pub fn severity_rank(s: Severity) -> u8 {
    match s {
        Severity::Error => 3,
        Severity::Warning => 2,
        Severity::Info => 1,
        Severity::NotAvailable => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown {kind} `{value}`")]
pub struct ParseEnumError {
    pub kind: &'static str,
    pub value: String,
}

impl FromStr for Severity {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "error" => Ok(Severity::Error),
            "warning" | "warn" => Ok(Severity::Warning),
            "info" => Ok(Severity::Info),
            "not_available" | "notavailable" | "n/a" | "na" => Ok(Severity::NotAvailable),
            _ => Err(ParseEnumError {
                kind: "severity",
                value: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criticality {
    Critical,
    NonCritical,
}

impl FromStr for Criticality {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "critical" => Ok(Criticality::Critical),
            "non_critical" | "noncritical" | "non-critical" => Ok(Criticality::NonCritical),
            _ => Err(ParseEnumError {
                kind: "criticality",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationKind {
    Repeated,
    OneShot,
}

impl FromStr for DurationKind {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "repeated" => Ok(DurationKind::Repeated),
            "one_shot" | "oneshot" | "one-shot" => Ok(DurationKind::OneShot),
            _ => Err(ParseEnumError {
                kind: "duration",
                value: s.to_string(),
            }),
        }
    }
}

/// A timestamped observation from a watched system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event_id: String,
    pub source_id: String,
    pub event_type: String,
    pub tags: BTreeSet<String>,
    pub payload: Map<String, Value>,
    pub occurred_at: Timestamp,
    pub received_at: Timestamp,
}

impl Event {
    pub fn cluster_key(&self) -> String {
        cluster_key(&self.source_id, &self.event_type)
    }
}

pub fn cluster_key(source_id: &str, event_type: &str) -> String {
    format!("{source_id}/{event_type}")
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum ValidationError {
    #[error("event document must be a JSON object")]
    NotAnObject,
    #[error("missing field `{field}`")]
    MissingField { field: String },
    #[error("field `{field}` must be {expected}")]
    InvalidField { field: String, expected: String },
    #[error("malformed timestamp `{value}`")]
    MalformedTimestamp { value: String },
    #[error("occurred_at lies after the time the event was received")]
    FutureTimestamp,
    #[error("source must not be empty")]
    EmptySource,
    #[error("type must not be empty")]
    EmptyType,
}

impl ValidationError {
    fn missing(field: &str) -> Self {
        ValidationError::MissingField {
            field: field.to_string(),
        }
    }

    fn invalid(field: &str, expected: &str) -> Self {
        ValidationError::InvalidField {
            field: field.to_string(),
            expected: expected.to_string(),
        }
    }
}

/// Validates a wire-format event document and stamps it with `received_at`.
///
/// Wire schema: `{"source", "type", "tags"?, "payload"?, "occurred_at"?}`.
pub fn validate_event(
    raw: &Value,
    event_id: impl Into<String>,
    received_at: Timestamp,
) -> Result<Event, ValidationError> {
    let doc = raw.as_object().ok_or(ValidationError::NotAnObject)?;

    let source_id = match doc.get("source") {
        None | Some(Value::Null) => return Err(ValidationError::missing("source")),
        Some(Value::String(s)) if s.trim().is_empty() => return Err(ValidationError::EmptySource),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ValidationError::invalid("source", "a string")),
    };
    let event_type = match doc.get("type") {
        None | Some(Value::Null) => return Err(ValidationError::missing("type")),
        Some(Value::String(s)) if s.trim().is_empty() => return Err(ValidationError::EmptyType),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ValidationError::invalid("type", "a string")),
    };
    let tags = match doc.get("tags") {
        None | Some(Value::Null) => BTreeSet::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| ValidationError::invalid("tags", "an array of strings"))
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(ValidationError::invalid("tags", "an array of strings")),
    };
    let payload = match doc.get("payload") {
        None | Some(Value::Null) => Map::new(),
        Some(Value::Object(map)) => map.clone(),
        Some(_) => return Err(ValidationError::invalid("payload", "an object")),
    };
    let occurred_at = match doc.get("occurred_at") {
        None | Some(Value::Null) => received_at,
        Some(Value::String(s)) => parse_rfc3339(s).map_err(|_| ValidationError::MalformedTimestamp {
            value: s.clone(),
        })?,
        Some(other) => {
            return Err(ValidationError::MalformedTimestamp {
                value: other.to_string(),
            })
        }
    };
    if occurred_at > received_at {
        return Err(ValidationError::FutureTimestamp);
    }

    Ok(Event {
        event_id: event_id.into(),
        source_id,
        event_type,
        tags,
        payload,
        occurred_at,
        received_at,
    })
}

/// A classified alert targeting one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub alert_id: String,
    pub event_id: String,
    pub user_id: String,
    pub rule_id: Option<String>,
    pub source_id: String,
    pub event_type: String,
    pub severity: Severity,
    pub criticality: Criticality,
    pub urgency: f64,
    pub duration: DurationKind,
    pub cluster_key: String,
    pub tags: BTreeSet<String>,
    pub body: String,
    pub created_at: Timestamp,
    /// Due date carried by the source event (payload `deadline`), if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub due_at: Option<Timestamp>,
}

impl Alert {
    pub fn is_critical(&self) -> bool {
        self.criticality == Criticality::Critical
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DeliveryCycle {
    Periodic { interval_secs: u64 },
    Aperiodic,
}

impl DeliveryCycle {
    pub fn periodic(interval_secs: u64) -> Option<Self> {
        (interval_secs > 0).then_some(DeliveryCycle::Periodic { interval_secs })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Channel {
    Console,
    Webhook { url: String },
    EmailFile { path: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("webhook url `{0}` is not a valid absolute URL")]
    InvalidUrl(String),
    #[error("email file path must not be empty")]
    EmptyPath,
}

impl Channel {
    pub fn webhook(url: impl Into<String>) -> Result<Self, ChannelError> {
        let channel = Channel::Webhook { url: url.into() };
        channel.validate()?;
        Ok(channel)
    }

    pub fn email_file(path: impl Into<String>) -> Result<Self, ChannelError> {
        let channel = Channel::EmailFile { path: path.into() };
        channel.validate()?;
        Ok(channel)
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        match self {
            Channel::Console => Ok(()),
            Channel::Webhook { url } => match url::Url::parse(url) {
                Ok(parsed) if parsed.has_host() => Ok(()),
                _ => Err(ChannelError::InvalidUrl(url.clone())),
            },
            Channel::EmailFile { path } if path.trim().is_empty() => Err(ChannelError::EmptyPath),
            Channel::EmailFile { .. } => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Channel::Console => "console",
            Channel::Webhook { .. } => "webhook",
            Channel::EmailFile { .. } => "email_file",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TriageAction {
    Issue,
    Suppress,
    Aggregate { window_id: String },
}

impl TriageAction {
    pub fn name(&self) -> &'static str {
        match self {
            TriageAction::Issue => "issue",
            TriageAction::Suppress => "suppress",
            TriageAction::Aggregate { .. } => "aggregate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Baseline,
    Learned,
    Safeguard,
}

/// Which triage layer produced a decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Safeguard,
    Dedup,
    Baseline,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub rule: String,
    pub contribution: String,
}

impl TraceEntry {
    pub fn new(rule: impl Into<String>, contribution: impl Into<String>) -> Self {
        Self {
            rule: rule.into(),
            contribution: contribution.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageDecision {
    pub decision_id: String,
    pub alert_id: String,
    pub user_id: String,
    pub action: TriageAction,
    pub policy_kind: PolicyKind,
    pub layer: Layer,
    pub feature_vector: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_values: Option<Vec<f64>>,
    pub trace: Vec<TraceEntry>,
    pub decided_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NotificationKind {
    Single { alert_id: String },
    Digest { window_id: String, alert_ids: Vec<String> },
}

impl NotificationKind {
    pub fn alert_ids(&self) -> Vec<&str> {
        match self {
            NotificationKind::Single { alert_id } => vec![alert_id.as_str()],
            NotificationKind::Digest { alert_ids, .. } => alert_ids.iter().map(String::as_str).collect(),
        }
    }

    pub fn is_digest(&self) -> bool {
        matches!(self, NotificationKind::Digest { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub notification_id: String,
    pub user_id: String,
    pub kind: NotificationKind,
    pub channel: Channel,
    pub cycle: DeliveryCycle,
    pub body: String,
    pub scheduled_at: Timestamp,
    pub dispatched_at: Option<Timestamp>,
    pub acknowledged_at: Option<Timestamp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    OpenedImmediately,
    OpenedLater,
    Acted,
    Dismissed,
    DeletedUnopened,
    MarkedIrrelevant,
    Ignored,
}

impl Signal {
    pub const ALL: [Signal; 7] = [
        Signal::OpenedImmediately,
        Signal::OpenedLater,
        Signal::Acted,
        Signal::Dismissed,
        Signal::DeletedUnopened,
        Signal::MarkedIrrelevant,
        Signal::Ignored,
    ];

    /// Counts as the user being reachable in the hour it was delivered.
    pub fn is_engagement(self) -> bool {
        matches!(self, Signal::OpenedImmediately | Signal::Acted)
    }

    /// Positive reactions double as an acknowledgment.
    pub fn is_positive(self) -> bool {
        matches!(self, Signal::OpenedImmediately | Signal::OpenedLater | Signal::Acted)
    }

    pub fn is_negative(self) -> bool {
        !self.is_positive()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Signal::OpenedImmediately => "opened_immediately",
            Signal::OpenedLater => "opened_later",
            Signal::Acted => "acted",
            Signal::Dismissed => "dismissed",
            Signal::DeletedUnopened => "deleted_unopened",
            Signal::MarkedIrrelevant => "marked_irrelevant",
            Signal::Ignored => "ignored",
        }
    }
}

impl FromStr for Signal {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Signal::ALL
            .into_iter()
            .find(|sig| sig.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| ParseEnumError {
                kind: "signal",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackSignal {
    pub notification_id: String,
    pub signal: Signal,
    pub observed_at: Timestamp,
    pub explicit: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone, Utc};
    use proptest::prelude::*;
    use serde_json::json;

    fn t0() -> Timestamp {
        Utc.with_ymd_and_hms(2024, 1, 1, 12, 0, 0).unwrap()
    }

    #[test]
    fn severity_ranks() {
        assert_eq!(severity_rank(Severity::Error), 3);
        assert_eq!(severity_rank(Severity::NotAvailable), 0);
        assert!(severity_rank(Severity::Error) > severity_rank(Severity::Info));
    }

    proptest! {
        #[test]
        fn rank_order_matches_enum_order(a in 0usize..4, b in 0usize..4) {
            let (sa, sb) = (Severity::ALL[a], Severity::ALL[b]);
            // ALL is listed highest first.
            prop_assert_eq!(severity_rank(sa).cmp(&severity_rank(sb)), b.cmp(&a));
            prop_assert_eq!(sa.cmp(&sb), severity_rank(sa).cmp(&severity_rank(sb)));
        }

        #[test]
        fn cluster_key_is_deterministic(src in "[a-z]{1,8}", ty in "[a-z.]{1,8}") {
            prop_assert_eq!(cluster_key(&src, &ty), cluster_key(&src, &ty));
            prop_assert_eq!(cluster_key(&src, &ty), format!("{}/{}", src, ty));
        }
    }

    #[test]
    fn stamps_received_at() {
        let occurred = t0() - Duration::minutes(3);
        let doc = json!({"source": "s1", "type": "price", "occurred_at": "2024-01-01T11:57:00Z"});
        let ev = validate_event(&doc, "ev-1", t0()).unwrap();
        assert_eq!(ev.occurred_at, occurred);
        assert!(ev.received_at >= ev.occurred_at);
        assert_eq!(ev.source_id, "s1");
    }

    #[test]
    fn missing_source_is_reported() {
        let err = validate_event(&json!({"type": "price"}), "ev-1", t0()).unwrap_err();
        assert_eq!(err, ValidationError::MissingField { field: "source".into() });
    }

    #[test]
    fn occurred_at_defaults_to_received_at() {
        let ev = validate_event(&json!({"source": "s1", "type": "t"}), "ev-1", t0()).unwrap();
        assert_eq!(ev.occurred_at, ev.received_at);
    }

    #[test]
    fn rejects_bad_documents() {
        let cases = [
            (json!({"source": "", "type": "t"}), ValidationError::EmptySource),
            (json!({"source": "s", "type": " "}), ValidationError::EmptyType),
            (
                json!({"source": "s", "type": "t", "occurred_at": "noon"}),
                ValidationError::MalformedTimestamp { value: "noon".into() },
            ),
            (
                json!({"source": "s", "type": "t", "occurred_at": "2024-01-02T00:00:00Z"}),
                ValidationError::FutureTimestamp,
            ),
            (json!([1, 2]), ValidationError::NotAnObject),
        ];
        for (doc, expected) in cases {
            assert_eq!(validate_event(&doc, "ev", t0()).unwrap_err(), expected);
        }
        assert!(matches!(
            validate_event(&json!({"source": "s", "type": "t", "tags": "x"}), "ev", t0()),
            Err(ValidationError::InvalidField { .. })
        ));
    }

    #[test]
    fn channel_validation() {
        assert!(Channel::webhook("https://hooks.example.com/x").is_ok());
        assert!(Channel::webhook("not a url").is_err());
        assert!(Channel::webhook("/relative/path").is_err());
        assert_eq!(Channel::email_file(""), Err(ChannelError::EmptyPath));
        assert_eq!(DeliveryCycle::periodic(0), None);
    }

    #[test]
    fn core_types_round_trip_through_json() {
        let ev = validate_event(
            &json!({"source": "node1", "type": "disk.full", "tags": ["b", "a"], "payload": {"pct": 99}}),
            "ev-7",
            t0(),
        )
        .unwrap();
        let back: Event = serde_json::from_str(&serde_json::to_string(&ev).unwrap()).unwrap();
        assert_eq!(back, ev);

        let decision = TriageDecision {
            decision_id: "dc-1".into(),
            alert_id: "al-1".into(),
            user_id: "u".into(),
            action: TriageAction::Aggregate { window_id: "wn-1".into() },
            policy_kind: PolicyKind::Baseline,
            layer: Layer::Baseline,
            feature_vector: vec![1.0, 0.5, 0.25, 0.5, 0.0, 1.0],
            q_values: None,
            trace: vec![TraceEntry::new("layer", "baseline")],
            decided_at: t0(),
        };
        let back: TriageDecision = serde_json::from_value(serde_json::to_value(&decision).unwrap()).unwrap();
        assert_eq!(back, decision);

        let n = Notification {
            notification_id: "nt-1".into(),
            user_id: "u".into(),
            kind: NotificationKind::Digest { window_id: "wn-1".into(), alert_ids: vec!["al-1".into()] },
            channel: Channel::Webhook { url: "http://x.test/h".into() },
            cycle: DeliveryCycle::Periodic { interval_secs: 14_400 },
            body: "1 alerts".into(),
            scheduled_at: t0(),
            dispatched_at: Some(t0()),
            acknowledged_at: None,
        };
        let back: Notification = serde_json::from_value(serde_json::to_value(&n).unwrap()).unwrap();
        assert_eq!(back, n);
    }

    #[test]
    fn signal_names_parse() {
        for s in Signal::ALL {
            assert_eq!(s.as_str().parse::<Signal>().unwrap(), s);
            assert_eq!(serde_json::to_value(s).unwrap(), json!(s.as_str()));
        }
        assert!("snoozed".parse::<Signal>().is_err());
    }
}
