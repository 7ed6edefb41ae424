//! Rendering, dispatch timing, channel delivery and escalation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::PathBuf;

use chrono::Duration;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::availability::{AvailabilityHistogram, Preferences};
use crate::config::NotifierConfig;
use crate::model::{Alert, Channel, Notification, NotificationKind, Severity, Signal};
use crate::time::{format_rfc3339, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DispatchOutcome {
    Sent,
    ChannelError { detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchRecord {
    pub notification_id: String,
    pub attempt: u32,
    pub channel: Channel,
    pub sent_at: Timestamp,
    pub outcome: DispatchOutcome,
}

/// How a notification came to exist, which decides its dispatch time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Safeguard,
    Single,
    Digest { deadline: Timestamp },
}

pub fn schedule_dispatch(
    origin: Origin,
    histogram: &AvailabilityHistogram,
    prefs: &Preferences,
    now: Timestamp,
    max_defer: Duration,
) -> Timestamp {
    match origin {
        Origin::Safeguard => now,
        Origin::Single => histogram.next_available_slot(prefs, now, max_defer).max(now),
        Origin::Digest { deadline } => deadline
            .min(histogram.next_available_slot(prefs, now, max_defer))
            .max(now),
    }
}

/// Plain-text body. Singles read `[SEVERITY] type: body (source)`; digests
/// start with an `N alerts` header followed by one group per event type.
pub fn render_text(kind: &NotificationKind, alerts: &[&Alert]) -> String {
    match kind {
        NotificationKind::Single { .. } => alerts.first().map(|a| single_line(a)).unwrap_or_default(),
        NotificationKind::Digest { .. } => {
            let mut groups: BTreeMap<&str, Vec<&Alert>> = BTreeMap::new();
            for a in alerts {
                groups.entry(a.event_type.as_str()).or_default().push(a);
            }
            let mut out = format!("{} alerts", alerts.len());
            for (ty, members) in groups {
                out.push_str(&format!("\n{ty} ({})", members.len()));
                for a in members {
                    out.push_str(&format!("\n  [{}] {} ({})", a.severity.label(), a.body, a.source_id));
                }
            }
            out
        }
    }
}

fn single_line(a: &Alert) -> String {
    format!("[{}] {}: {} ({})", a.severity.label(), a.event_type, a.body, a.source_id)
}

pub fn notification_severity(n: &Notification, alerts: &BTreeMap<String, Alert>) -> Severity {
    n.kind
        .alert_ids()
        .iter()
        .filter_map(|id| alerts.get(*id))
        .map(|a| a.severity)
        .max()
        .unwrap_or(Severity::NotAvailable)
}

/// Outbound webhook document.
pub fn webhook_document(n: &Notification, severity: Severity, sent_at: Timestamp) -> Value {
    json!({
        "notification_id": n.notification_id,
        "user": n.user_id,
        "kind": if n.kind.is_digest() { "digest" } else { "single" },
        "severity": severity.as_str(),
        "body": n.body,
        "alerts": n.kind.alert_ids(),
        "sent_at": format_rfc3339(sent_at),
    })
}

fn email_text(n: &Notification, sent_at: Timestamp) -> String {
    let subject = n.body.lines().next().unwrap_or_default();
    format!(
        "To: {}\nDate: {}\nSubject: {}\nX-Notification-Id: {}\n\n{}\n\n",
        n.user_id,
        format_rfc3339(sent_at),
        subject,
        n.notification_id,
        n.body
    )
}

/// A message for a channel other than the console outbox.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutboundMessage {
    pub notification_id: String,
    pub user_id: String,
    pub attempt: u32,
    pub channel: Channel,
    pub payload: String,
}

/// Delivers webhook and email-file messages; errors are reported as text.
pub trait Transport {
    fn send(&mut self, msg: &OutboundMessage) -> Result<(), String>;
}

/// Accepts everything without side effects.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullTransport;

impl Transport for NullTransport {
    fn send(&mut self, _msg: &OutboundMessage) -> Result<(), String> {
        Ok(())
    }
}

/// Real adapters: HTTP POST for webhooks, file append for email.
pub struct AdapterTransport {
    agent: ureq::Agent,
}

impl Default for AdapterTransport {
    fn default() -> Self {
        Self::new(std::time::Duration::from_secs(5))
    }
}

impl AdapterTransport {
    pub fn new(timeout: std::time::Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Self { agent }
    }
}

/// `{user}` in an email-file path expands to the recipient.
pub fn email_path(template: &str, user_id: &str) -> PathBuf {
    PathBuf::from(template.replace("{user}", user_id))
}

impl Transport for AdapterTransport {
    fn send(&mut self, msg: &OutboundMessage) -> Result<(), String> {
        match &msg.channel {
            Channel::Console => Ok(()),
            Channel::Webhook { url } => self
                .agent
                .post(url.as_str())
                .header("content-type", "application/json")
                .send(msg.payload.as_str())
                .map(|_| ())
                .map_err(|e| match e {
                    ureq::Error::StatusCode(code) => format!("status {code}"),
                    ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
                        "connect".to_string()
                    }
                    ureq::Error::Timeout(_) => "timeout".to_string(),
                    other => other.to_string(),
                }),
            Channel::EmailFile { path } => {
                let path = email_path(path, &msg.user_id);
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
                }
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| e.to_string())?;
                f.write_all(msg.payload.as_bytes()).map_err(|e| e.to_string())
            }
        }
    }
}

/// One console delivery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboxEntry {
    pub seq: u64,
    pub notification_id: String,
    pub user_id: String,
    pub attempt: u32,
    pub sent_at: Timestamp,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryStatus {
    pub critical: bool,
    pub severity: Severity,
    pub attempts: u32,
    /// Terminal feedback has been received.
    pub settled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DispatchError {
    #[error("unknown notification {0}")]
    UnknownNotification(String),
    #[error("attempt {attempt} exceeds the limit of {max}")]
    AttemptCap { attempt: u32, max: u32 },
    #[error("notification is scheduled for {0}")]
    NotDue(String),
}

/// Per-user data the notifier needs to pick a channel.
pub trait PreferenceLookup {
    fn preferences(&self, user_id: &str) -> Preferences;
}

impl<F: Fn(&str) -> Preferences> PreferenceLookup for F {
    fn preferences(&self, user_id: &str) -> Preferences {
        self(user_id)
    }
}

/// Result of a dispatch pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DispatchPass {
    pub records: Vec<DispatchRecord>,
    /// Notifications whose first successful delivery happened in this pass.
    pub first_deliveries: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Notifier {
    notifications: BTreeMap<String, Notification>,
    status: BTreeMap<String, DeliveryStatus>,
    records: BTreeMap<String, Vec<DispatchRecord>>,
    /// (due, fifo seq, id, attempt)
    pending: BTreeSet<(Timestamp, u64, String, u32)>,
    escalations: BTreeSet<(Timestamp, String)>,
    outbox: Vec<OutboxEntry>,
    recent_sends: BTreeMap<String, Vec<Timestamp>>,
    seq: u64,
}

impl Notifier {
    pub fn notification(&self, id: &str) -> Option<&Notification> {
        self.notifications.get(id)
    }

    pub fn notifications(&self) -> impl Iterator<Item = &Notification> {
        self.notifications.values()
    }

    pub fn status(&self, id: &str) -> Option<&DeliveryStatus> {
        self.status.get(id)
    }

    pub fn records(&self, id: &str) -> &[DispatchRecord] {
        self.records.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn outbox(&self) -> &[OutboxEntry] {
        &self.outbox
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn next_due(&self) -> Option<Timestamp> {
        let p = self.pending.first().map(|e| e.0);
        let e = self.escalations.first().map(|e| e.0);
        match (p, e) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Successful deliveries to `user_id` in the hour up to `now`.
    pub fn interruptions_last_hour(&self, user_id: &str, now: Timestamp) -> u32 {
        let from = now - Duration::hours(1);
        self.recent_sends
            .get(user_id)
            .map(|v| v.iter().filter(|&&t| t > from && t <= now).count() as u32)
            .unwrap_or(0)
    }

    pub fn enqueue(&mut self, notification: Notification, critical: bool, severity: Severity) {
        let id = notification.notification_id.clone();
        self.seq += 1;
        self.pending.insert((notification.scheduled_at, self.seq, id.clone(), 1));
        self.status.insert(
            id.clone(),
            DeliveryStatus {
                critical,
                severity,
                attempts: 0,
                settled: false,
            },
        );
        self.notifications.insert(id, notification);
    }

    /// Sends every queued attempt whose time has come, in (time, FIFO) order.
    pub fn dispatch_due(
        &mut self,
        now: Timestamp,
        prefs: &dyn PreferenceLookup,
        cfg: &NotifierConfig,
        transport: &mut dyn Transport,
    ) -> DispatchPass {
        let mut pass = DispatchPass::default();
        while let Some((due, _, _, _)) = self.pending.first() {
            if *due > now {
                break;
            }
            let (_, _, id, attempt) = self.pending.pop_first().expect("checked non-empty");
            if let Ok(rec) = self.dispatch(&id, attempt, now, prefs, cfg, transport) {
                self.after_attempt(&rec, cfg, &mut pass);
            }
        }
        pass
    }

    /// One delivery attempt on the channel for that attempt number.
    pub fn dispatch(
        &mut self,
        id: &str,
        attempt: u32,
        now: Timestamp,
        prefs: &dyn PreferenceLookup,
        cfg: &NotifierConfig,
        transport: &mut dyn Transport,
    ) -> Result<DispatchRecord, DispatchError> {
        if attempt == 0 || attempt > cfg.max_attempts {
            return Err(DispatchError::AttemptCap {
                attempt,
                max: cfg.max_attempts,
            });
        }
        let n = self
            .notifications
            .get(id)
            .ok_or_else(|| DispatchError::UnknownNotification(id.to_string()))?;
        if n.scheduled_at > now {
            return Err(DispatchError::NotDue(format_rfc3339(n.scheduled_at)));
        }
        let channel = prefs.preferences(&n.user_id).preferred_channel(attempt as usize - 1);
        let severity = self.status[id].severity;
        let outcome = match &channel {
            Channel::Console => {
                self.outbox.push(OutboxEntry {
                    seq: self.outbox.len() as u64 + 1,
                    notification_id: id.to_string(),
                    user_id: n.user_id.clone(),
                    attempt,
                    sent_at: now,
                    text: n.body.clone(),
                });
                Ok(())
            }
            other => {
                let payload = match other {
                    Channel::Webhook { .. } => webhook_document(n, severity, now).to_string(),
                    _ => email_text(n, now),
                };
                transport.send(&OutboundMessage {
                    notification_id: id.to_string(),
                    user_id: n.user_id.clone(),
                    attempt,
                    channel: other.clone(),
                    payload,
                })
            }
        };
        let record = DispatchRecord {
            notification_id: id.to_string(),
            attempt,
            channel: channel.clone(),
            sent_at: now,
            outcome: match outcome {
                Ok(()) => DispatchOutcome::Sent,
                Err(detail) => DispatchOutcome::ChannelError { detail },
            },
        };
        self.records.entry(id.to_string()).or_default().push(record.clone());
        self.status.get_mut(id).expect("status exists").attempts = attempt;
        Ok(record)
    }

    fn after_attempt(&mut self, rec: &DispatchRecord, cfg: &NotifierConfig, pass: &mut DispatchPass) {
        let id = rec.notification_id.clone();
        let now = rec.sent_at;
        match rec.outcome {
            DispatchOutcome::Sent => {
                let n = self.notifications.get_mut(&id).expect("known notification");
                n.channel = rec.channel.clone();
                if n.dispatched_at.is_none() {
                    n.dispatched_at = Some(now);
                    pass.first_deliveries.push(id.clone());
                }
                let sends = self.recent_sends.entry(n.user_id.clone()).or_default();
                sends.retain(|&t| t > now - Duration::hours(1));
                sends.push(now);
                let st = &self.status[&id];
                if st.critical && !st.settled && n.acknowledged_at.is_none() && rec.attempt < cfg.max_attempts {
                    self.escalations.insert((now + cfg.ack_timeout(), id));
                }
            }
            DispatchOutcome::ChannelError { .. } => {
                if rec.attempt < cfg.max_attempts {
                    self.seq += 1;
                    self.pending
                        .insert((now + cfg.retry_backoff(), self.seq, id, rec.attempt + 1));
                }
            }
        }
        pass.records.push(rec.clone());
    }

    /// Re-sends critical notifications nobody acknowledged in time on the
    /// next channel of the user's list.
    pub fn escalate_unacknowledged(
        &mut self,
        now: Timestamp,
        prefs: &dyn PreferenceLookup,
        cfg: &NotifierConfig,
        transport: &mut dyn Transport,
    ) -> DispatchPass {
        let mut pass = DispatchPass::default();
        while let Some((due, _)) = self.escalations.first() {
            if *due > now {
                break;
            }
            let (_, id) = self.escalations.pop_first().expect("checked non-empty");
            let st = &self.status[&id];
            let acked = self.notifications[&id].acknowledged_at.is_some();
            if !st.critical || st.settled || acked || st.attempts >= cfg.max_attempts {
                continue;
            }
            let attempt = st.attempts + 1;
            if let Ok(rec) = self.dispatch(&id, attempt, now, prefs, cfg, transport) {
                self.after_attempt(&rec, cfg, &mut pass);
            }
        }
        pass
    }

    pub fn acknowledge(&mut self, id: &str, at: Timestamp) -> Result<(), DispatchError> {
        let n = self
            .notifications
            .get_mut(id)
            .ok_or_else(|| DispatchError::UnknownNotification(id.to_string()))?;
        if n.acknowledged_at.is_none() {
            n.acknowledged_at = Some(at);
        }
        Ok(())
    }

    /// Terminal feedback stops escalation; positive feedback also acknowledges.
    pub fn record_feedback(&mut self, id: &str, signal: Signal, at: Timestamp) -> Result<(), DispatchError> {
        let st = self
            .status
            .get_mut(id)
            .ok_or_else(|| DispatchError::UnknownNotification(id.to_string()))?;
        st.settled = true;
        if signal.is_positive() {
            self.acknowledge(id, at)?;
        }
        Ok(())
    }
}
