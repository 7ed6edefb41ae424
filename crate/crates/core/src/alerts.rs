//! Turns events into classified alerts and keeps the per-cluster statistics
//! used for grouping, rule recommendations and volume estimates.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{cluster_key, Alert, Criticality, DurationKind, Event, Severity};
use crate::time::{parse_rfc3339, Timestamp};

pub const DEFAULT_SEVERITY: Severity = Severity::Info;
pub const DEFAULT_CRITICALITY: Criticality = Criticality::NonCritical;
pub const DEFAULT_URGENCY: f64 = 0.5;
pub const DEFAULT_DURATION: DurationKind = DurationKind::OneShot;

/// Predicate over an event. Every present field must hold; absent fields
/// match anything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Exact type, or a prefix when ending in `*` (e.g. `deadline.*`).
    #[serde(default, rename = "type", skip_serializing_if = "Option::is_none")]
    pub event_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags_any: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_eq: Option<Map<String, Value>>,
}

impl RuleMatch {
    pub fn matches(&self, event: &Event) -> bool {
        if let Some(source) = &self.source {
            if source != &event.source_id {
                return false;
            }
        }
        if let Some(pattern) = &self.event_type {
            let ok = match pattern.strip_suffix('*') {
                Some(prefix) => event.event_type.starts_with(prefix),
                None => pattern == &event.event_type,
            };
            if !ok {
                return false;
            }
        }
        if let Some(tags) = &self.tags_any {
            if !tags.is_empty() && !tags.iter().any(|t| event.tags.contains(t)) {
                return false;
            }
        }
        if let Some(expected) = &self.payload_eq {
            if !expected.iter().all(|(k, v)| event.payload.get(k) == Some(v)) {
                return false;
            }
        }
        true
    }
}

/// Dimensions a rule pins; unset ones are filled in by the taxonomy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<Severity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criticality: Option<Criticality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub urgency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<DurationKind>,
}

impl Assignment {
    pub fn full(severity: Severity, criticality: Criticality, urgency: f64, duration: DurationKind) -> Self {
        Self {
            severity: Some(severity),
            criticality: Some(criticality),
            urgency: Some(urgency),
            duration: Some(duration),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.severity.is_some() && self.criticality.is_some() && self.urgency.is_some() && self.duration.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleOrigin {
    User,
    Recommendation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRule {
    pub rule_id: String,
    pub user_id: String,
    #[serde(rename = "match")]
    pub matcher: RuleMatch,
    pub assign: Assignment,
    pub enabled: bool,
    pub created_by: RuleOrigin,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuleError {
    #[error("urgency {0} is outside [0, 1]")]
    UrgencyOutOfRange(f64),
    #[error("rule needs a user")]
    MissingUser,
}

impl AlertRule {
    pub fn validate(&self) -> Result<(), RuleError> {
        if self.user_id.trim().is_empty() {
            return Err(RuleError::MissingUser);
        }
        match self.assign.urgency {
            Some(u) if !(0.0..=1.0).contains(&u) => Err(RuleError::UrgencyOutOfRange(u)),
            _ => Ok(()),
        }
    }
}

/// An alert before taxonomy classification.
#[derive(Debug, Clone, PartialEq)]
pub struct AlertDraft {
    pub event_id: String,
    pub user_id: String,
    pub rule_id: String,
    pub source_id: String,
    pub event_type: String,
    pub tags: BTreeSet<String>,
    pub body: String,
    pub created_at: Timestamp,
    pub due_at: Option<Timestamp>,
    pub assigned: Assignment,
}

/// First enabled rule (in priority order) that matches wins.
pub fn generate_alert<'a>(event: &Event, rules: impl IntoIterator<Item = &'a AlertRule>) -> Option<AlertDraft> {
    let rule = rules.into_iter().find(|r| r.enabled && r.matcher.matches(event))?;
    Some(AlertDraft {
        event_id: event.event_id.clone(),
        user_id: rule.user_id.clone(),
        rule_id: rule.rule_id.clone(),
        source_id: event.source_id.clone(),
        event_type: event.event_type.clone(),
        tags: event.tags.clone(),
        body: event_body(event),
        created_at: event.received_at,
        due_at: event
            .payload
            .get("deadline")
            .and_then(Value::as_str)
            .and_then(|s| parse_rfc3339(s).ok()),
        assigned: rule.assign.clone(),
    })
}

fn event_body(event: &Event) -> String {
    ["message", "summary", "title"]
        .iter()
        .find_map(|k| event.payload.get(*k).and_then(Value::as_str))
        .map(str::to_string)
        .unwrap_or_else(|| event.event_type.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyEntry {
    /// Matches the type itself or any dotted child (`deadline` covers `deadline.paper`).
    pub prefix: String,
    #[serde(default)]
    pub severity: Option<Severity>,
    #[serde(default)]
    pub criticality: Option<Criticality>,
    #[serde(default)]
    pub urgency: Option<f64>,
    #[serde(default)]
    pub duration: Option<DurationKind>,
}

impl TaxonomyEntry {
    fn covers(&self, event_type: &str) -> bool {
        let p = self.prefix.trim_end_matches(".*");
        event_type == p || (event_type.starts_with(p) && event_type[p.len()..].starts_with('.'))
    }
}

/// Longest matching taxonomy prefix for a type.
pub fn taxonomy_lookup<'a>(taxonomy: &'a [TaxonomyEntry], event_type: &str) -> Option<&'a TaxonomyEntry> {
    taxonomy
        .iter()
        .filter(|e| e.covers(event_type))
        .max_by_key(|e| e.prefix.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classified {
    pub alert: Alert,
    /// Set when the type was unknown and defaults were used.
    pub note: Option<String>,
}

pub fn classify_alert(draft: AlertDraft, taxonomy: &[TaxonomyEntry], alert_id: impl Into<String>) -> Classified {
    let mut dims = draft.assigned.clone();
    let mut note = None;
    if !dims.is_complete() {
        match taxonomy_lookup(taxonomy, &draft.event_type) {
            Some(entry) => {
                dims.severity = dims.severity.or(entry.severity);
                dims.criticality = dims.criticality.or(entry.criticality);
                dims.urgency = dims.urgency.or(entry.urgency);
                dims.duration = dims.duration.or(entry.duration);
            }
            None => {
                note = Some(format!(
                    "type `{}` is not in the taxonomy; defaults applied",
                    draft.event_type
                ))
            }
        }
    }
    let alert = Alert {
        alert_id: alert_id.into(),
        cluster_key: cluster_key(&draft.source_id, &draft.event_type),
        event_id: draft.event_id,
        user_id: draft.user_id,
        rule_id: Some(draft.rule_id),
        source_id: draft.source_id,
        event_type: draft.event_type,
        severity: dims.severity.unwrap_or(DEFAULT_SEVERITY),
        criticality: dims.criticality.unwrap_or(DEFAULT_CRITICALITY),
        urgency: dims.urgency.unwrap_or(DEFAULT_URGENCY).clamp(0.0, 1.0),
        duration: dims.duration.unwrap_or(DEFAULT_DURATION),
        tags: draft.tags,
        body: draft.body,
        created_at: draft.created_at,
        due_at: draft.due_at,
    };
    Classified { alert, note }
}

/// 1.0 for the same cluster key, otherwise Jaccard similarity of the tag sets
/// (0 when both are empty).
pub fn similarity(a: &Alert, b: &Alert) -> f64 {
    if a.cluster_key == b.cluster_key {
        return 1.0;
    }
    let union = a.tags.union(&b.tags).count();
    if union == 0 {
        return 0.0;
    }
    a.tags.intersection(&b.tags).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertCluster {
    pub cluster_id: String,
    pub member_alert_ids: Vec<String>,
    pub representative: String,
    pub tag_signature: BTreeSet<String>,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Single-linkage clustering: connected components of the graph whose edges
/// are pairs with similarity at or above `threshold`.
///
/// Thresholds outside `(0, 1]` are clamped into it.
pub fn cluster_alerts(alerts: &[Alert], threshold: f64) -> Vec<AlertCluster> {
    let threshold = if threshold.is_nan() { 1.0 } else { threshold.clamp(f64::MIN_POSITIVE, 1.0) };
    let n = alerts.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            if similarity(&alerts[i], &alerts[j]) >= threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }

    let mut clusters: Vec<(Timestamp, usize, AlertCluster)> = groups
        .into_values()
        .map(|mut members| {
            members.sort_by_key(|&i| (alerts[i].created_at, i));
            let rep = members[0];
            let cluster = AlertCluster {
                cluster_id: format!("cluster:{}", alerts[rep].alert_id),
                member_alert_ids: members.iter().map(|&i| alerts[i].alert_id.clone()).collect(),
                representative: alerts[rep].alert_id.clone(),
                tag_signature: members.iter().flat_map(|&i| alerts[i].tags.iter().cloned()).collect(),
            };
            (alerts[rep].created_at, rep, cluster)
        })
        .collect();
    clusters.sort_by_key(|(at, idx, _)| (*at, *idx));
    clusters.into_iter().map(|(_, _, c)| c).collect()
}

/// Disabled candidate rules for (source, type) pairs that keep showing up
/// without matching any of the user's rules. Largest groups first.
pub fn recommend_rules<'a>(
    user_id: &str,
    unmatched: impl IntoIterator<Item = &'a Event>,
    min_support: usize,
    taxonomy: &[TaxonomyEntry],
) -> Vec<AlertRule> {
    let mut groups: BTreeMap<(String, String), usize> = BTreeMap::new();
    for ev in unmatched {
        *groups.entry((ev.source_id.clone(), ev.event_type.clone())).or_default() += 1;
    }
    let mut ranked: Vec<((String, String), usize)> =
        groups.into_iter().filter(|(_, n)| *n >= min_support).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    ranked
        .into_iter()
        .map(|((source, event_type), _)| {
            let entry = taxonomy_lookup(taxonomy, &event_type);
            AlertRule {
                rule_id: format!("candidate:{}", cluster_key(&source, &event_type)),
                user_id: user_id.to_string(),
                matcher: RuleMatch {
                    source: Some(source),
                    event_type: Some(event_type),
                    ..RuleMatch::default()
                },
                assign: Assignment {
                    severity: Some(entry.and_then(|e| e.severity).unwrap_or(DEFAULT_SEVERITY)),
                    criticality: Some(entry.and_then(|e| e.criticality).unwrap_or(DEFAULT_CRITICALITY)),
                    urgency: Some(entry.and_then(|e| e.urgency).unwrap_or(DEFAULT_URGENCY)),
                    duration: Some(entry.and_then(|e| e.duration).unwrap_or(DEFAULT_DURATION)),
                },
                enabled: false,
                created_by: RuleOrigin::Recommendation,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingEstimate {
    pub expected: u64,
    pub note: Option<String>,
}

/// Poisson-mean extrapolation: mean daily count times days left until
/// `deadline`, rounded, never negative.
pub fn estimate_pending(history: &[u32], deadline: Timestamp, now: Timestamp) -> PendingEstimate {
    if history.is_empty() {
        return PendingEstimate {
            expected: 0,
            note: Some("no history for this cluster; assuming nothing pending".into()),
        };
    }
    let days_left = (deadline - now).num_milliseconds() as f64 / 86_400_000.0;
    if days_left <= 0.0 {
        return PendingEstimate { expected: 0, note: None };
    }
    let lambda = history.iter().map(|&c| c as f64).sum::<f64>() / history.len() as f64;
    PendingEstimate {
        expected: (lambda * days_left).round().max(0.0) as u64,
        note: None,
    }
}

/// Daily event counts for one cluster key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterHistory {
    first_day: Option<i64>,
    counts: BTreeMap<i64, u32>,
}

impl ClusterHistory {
    pub fn record(&mut self, day: i64) {
        self.first_day = Some(self.first_day.map_or(day, |d| d.min(day)));
        *self.counts.entry(day).or_default() += 1;
    }

    /// Installs `counts` as the days immediately before `before_day`.
    pub fn seed(&mut self, counts: &[u32], before_day: i64) {
        let start = before_day - counts.len() as i64;
        for (i, &c) in counts.iter().enumerate() {
            let day = start + i as i64;
            *self.counts.entry(day).or_default() += c;
        }
        if !counts.is_empty() {
            self.first_day = Some(self.first_day.map_or(start, |d| d.min(start)));
        }
    }

    /// Completed days in the trailing window before `today`, oldest first.
    pub fn trailing(&self, today: i64, days: u32) -> Vec<u32> {
        let Some(first) = self.first_day else {
            return Vec::new();
        };
        let from = first.max(today - days as i64);
        (from..today).map(|d| self.counts.get(&d).copied().unwrap_or(0)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone, Utc};
    use proptest::prelude::*;
    use serde_json::json;

    fn t0() -> Timestamp {
        Utc.with_ymd_and_hms(2024, 1, 1, 9, 0, 0).unwrap()
    }

    fn event(source: &str, ty: &str, payload: Value) -> Event {
        Event {
            event_id: "ev-1".into(),
            source_id: source.into(),
            event_type: ty.into(),
            tags: BTreeSet::new(),
            payload: payload.as_object().cloned().unwrap_or_default(),
            occurred_at: t0(),
            received_at: t0(),
        }
    }

    fn rule(id: &str, matcher: RuleMatch, assign: Assignment) -> AlertRule {
        AlertRule {
            rule_id: id.into(),
            user_id: "u1".into(),
            matcher,
            assign,
            enabled: true,
            created_by: RuleOrigin::User,
        }
    }

    fn alert(id: &str, key: &str, tags: &[&str], minute: i64) -> Alert {
        let (source, ty) = key.split_once('/').unwrap();
        Alert {
            alert_id: id.into(),
            event_id: format!("ev-{id}"),
            user_id: "u1".into(),
            rule_id: None,
            source_id: source.into(),
            event_type: ty.into(),
            severity: Severity::Info,
            criticality: Criticality::NonCritical,
            urgency: 0.5,
            duration: DurationKind::OneShot,
            cluster_key: key.into(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
            body: String::new(),
            created_at: t0() + Duration::minutes(minute),
            due_at: None,
        }
    }

    #[test]
    fn first_matching_rule_assigns_dimensions() {
        let ev = event("node1", "disk.full", json!({"message": "disk full"}));
        let rules = vec![
            rule(
                "r1",
                RuleMatch { source: Some("node1".into()), ..Default::default() },
                Assignment::full(Severity::Error, Criticality::Critical, 0.9, DurationKind::OneShot),
            ),
            rule(
                "r2",
                RuleMatch::default(),
                Assignment::full(Severity::Info, Criticality::NonCritical, 0.1, DurationKind::Repeated),
            ),
        ];
        let draft = generate_alert(&ev, &rules).unwrap();
        assert_eq!(draft.rule_id, "r1");
        let a = classify_alert(draft, &[], "al-1").alert;
        assert_eq!(
            (a.severity, a.criticality, a.urgency, a.duration),
            (Severity::Error, Criticality::Critical, 0.9, DurationKind::OneShot)
        );
        assert_eq!(a.body, "disk full");
        assert_eq!(a.cluster_key, "node1/disk.full");
    }

    #[test]
    fn no_match_no_alert() {
        let ev = event("node1", "disk.full", json!({}));
        let rules = vec![rule(
            "r1",
            RuleMatch { source: Some("node2".into()), ..Default::default() },
            Assignment::default(),
        )];
        assert!(generate_alert(&ev, &rules).is_none());
        let mut disabled = rule("r2", RuleMatch::default(), Assignment::default());
        disabled.enabled = false;
        assert!(generate_alert(&ev, &[disabled]).is_none());
    }

    #[test]
    fn matcher_clauses() {
        let mut ev = event("hr", "travel.request.conf-a", json!({"dept": "ai", "n": 3}));
        ev.tags.insert("travel".into());
        let m = |f: fn(&mut RuleMatch)| {
            let mut rm = RuleMatch::default();
            f(&mut rm);
            rm
        };
        assert!(m(|r| r.event_type = Some("travel.*".into())).matches(&ev));
        assert!(!m(|r| r.event_type = Some("travel".into())).matches(&ev));
        assert!(m(|r| r.tags_any = Some(vec!["x".into(), "travel".into()])).matches(&ev));
        assert!(!m(|r| r.tags_any = Some(vec!["x".into()])).matches(&ev));
        assert!(m(|r| r.payload_eq = json!({"dept": "ai"}).as_object().cloned()).matches(&ev));
        assert!(!m(|r| r.payload_eq = json!({"n": "3"}).as_object().cloned()).matches(&ev));
    }

    #[test]
    fn deadline_payload_becomes_due_date() {
        let ev = event("hr", "travel.request", json!({"deadline": "2024-01-10T00:00:00Z"}));
        let draft = generate_alert(&ev, &[rule("r", RuleMatch::default(), Assignment::default())]).unwrap();
        assert_eq!(draft.due_at, Some(Utc.with_ymd_and_hms(2024, 1, 10, 0, 0, 0).unwrap()));
    }

    fn draft(ty: &str, assigned: Assignment) -> AlertDraft {
        AlertDraft {
            event_id: "ev-1".into(),
            user_id: "u1".into(),
            rule_id: "r1".into(),
            source_id: "src".into(),
            event_type: ty.into(),
            tags: BTreeSet::new(),
            body: "b".into(),
            created_at: t0(),
            due_at: None,
            assigned,
        }
    }

    #[test]
    fn classification_fills_only_unset_dimensions() {
        let taxonomy = crate::config::default_taxonomy();
        let full = Assignment::full(Severity::Error, Criticality::Critical, 0.9, DurationKind::Repeated);
        let c = classify_alert(draft("deadline.paper", full), &taxonomy, "al-1");
        assert_eq!(
            (c.alert.severity, c.alert.criticality, c.alert.urgency, c.alert.duration),
            (Severity::Error, Criticality::Critical, 0.9, DurationKind::Repeated)
        );
        assert!(c.note.is_none());

        let partial = Assignment { urgency: Some(0.7), ..Default::default() };
        let c = classify_alert(draft("deadline.paper", partial), &taxonomy, "al-2");
        assert_eq!(c.alert.severity, Severity::Warning);
        assert_eq!(c.alert.urgency, 0.7);

        let c = classify_alert(draft("mystery", Assignment::default()), &taxonomy, "al-3");
        assert_eq!(
            (c.alert.severity, c.alert.criticality, c.alert.urgency, c.alert.duration),
            (Severity::Info, Criticality::NonCritical, 0.5, DurationKind::OneShot)
        );
        assert!(c.note.unwrap().contains("mystery"));
    }

    #[test]
    fn taxonomy_prefixes_respect_segments() {
        let taxonomy = crate::config::default_taxonomy();
        assert!(taxonomy_lookup(&taxonomy, "deadline").is_some());
        assert!(taxonomy_lookup(&taxonomy, "deadline.x.y").is_some());
        assert!(taxonomy_lookup(&taxonomy, "deadlines").is_none());
        assert_eq!(taxonomy_lookup(&taxonomy, "travel.request.conf-a").unwrap().prefix, "travel.request");
    }

    #[test]
    fn similarity_examples() {
        let a = alert("a", "s/t", &[], 0);
        let b = alert("b", "s/t", &["x"], 1);
        assert_eq!(similarity(&a, &b), 1.0);
        let c = alert("c", "s1/t", &["a", "b", "c"], 0);
        let d = alert("d", "s2/t", &["b", "c", "d"], 0);
        assert_eq!(similarity(&c, &d), 0.5);
        let e = alert("e", "s1/t", &[], 0);
        let f = alert("f", "s2/t", &[], 0);
        assert_eq!(similarity(&e, &f), 0.0);
    }

    #[test]
    fn clustering_examples() {
        assert!(cluster_alerts(&[], 0.5).is_empty());

        let same: Vec<Alert> = (0..3).map(|i| alert(&format!("a{i}"), "s/t", &[], i)).collect();
        let clusters = cluster_alerts(&same, 0.5);
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].member_alert_ids.len(), 3);
        assert_eq!(clusters[0].representative, "a0");

        let a = alert("A", "s1/t", &["a", "b"], 0);
        let b = alert("B", "s2/t", &["b", "c"], 1);
        let c = alert("C", "s3/t", &["x", "y"], 2);
        let clusters = cluster_alerts(&[a, b, c], 0.3);
        let parts: Vec<Vec<&str>> = clusters
            .iter()
            .map(|c| c.member_alert_ids.iter().map(String::as_str).collect())
            .collect();
        assert_eq!(parts, vec![vec!["A", "B"], vec!["C"]]);
    }

    #[test]
    fn clusters_are_ordered_by_representative_time() {
        let late = alert("late", "s1/t", &[], 10);
        let early = alert("early", "s2/t", &[], 0);
        let clusters = cluster_alerts(&[late, early], 1.0);
        assert_eq!(clusters[0].representative, "early");
        assert_eq!(clusters[1].representative, "late");
    }

    // Independent oracle: boolean reachability closure over the adjacency
    // matrix, then grouping by reachable sets.
    fn closure_partition(alerts: &[Alert], threshold: f64) -> BTreeSet<BTreeSet<String>> {
        let n = alerts.len();
        let mut reach = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                reach[i][j] = i == j || similarity(&alerts[i], &alerts[j]) >= threshold;
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    reach[i][j] = reach[i][j] || (reach[i][k] && reach[k][j]);
                }
            }
        }
        (0..n)
            .map(|i| (0..n).filter(|&j| reach[i][j]).map(|j| alerts[j].alert_id.clone()).collect())
            .collect()
    }

    fn arb_alerts() -> impl Strategy<Value = Vec<Alert>> {
        prop::collection::vec((0usize..3, prop::collection::btree_set(0usize..5, 0..4), 0i64..50), 0..=8).prop_map(
            |specs| {
                specs
                    .into_iter()
                    .enumerate()
                    .map(|(i, (key, tags, minute))| {
                        let tag_names: Vec<String> = tags.into_iter().map(|t| format!("t{t}")).collect();
                        let tag_refs: Vec<&str> = tag_names.iter().map(String::as_str).collect();
                        alert(&format!("a{i}"), &format!("s{key}/ev"), &tag_refs, minute)
                    })
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn single_linkage_matches_closure_oracle(alerts in arb_alerts(), threshold in prop::sample::select(vec![0.2, 0.3, 0.5, 0.75, 1.0])) {
            let clusters = cluster_alerts(&alerts, threshold);
            let got: BTreeSet<BTreeSet<String>> = clusters
                .iter()
                .map(|c| c.member_alert_ids.iter().cloned().collect())
                .collect();
            prop_assert_eq!(got, closure_partition(&alerts, threshold));
            // Partition: every alert exactly once.
            let total: usize = clusters.iter().map(|c| c.member_alert_ids.len()).sum();
            prop_assert_eq!(total, alerts.len());
            for c in &clusters {
                prop_assert!(c.member_alert_ids.contains(&c.representative));
            }
        }

        #[test]
        fn same_cluster_key_always_shares_a_cluster(alerts in arb_alerts(), threshold in 0.05f64..=1.0) {
            let clusters = cluster_alerts(&alerts, threshold);
            let home: BTreeMap<&str, usize> = clusters
                .iter()
                .enumerate()
                .flat_map(|(i, c)| c.member_alert_ids.iter().map(move |id| (id.as_str(), i)))
                .collect();
            for a in &alerts {
                for b in &alerts {
                    if a.cluster_key == b.cluster_key {
                        prop_assert_eq!(home[a.alert_id.as_str()], home[b.alert_id.as_str()]);
                    }
                }
            }
        }
    }

    fn unmatched(source: &str, ty: &str, n: usize) -> Vec<Event> {
        (0..n).map(|_| event(source, ty, json!({}))).collect()
    }

    #[test]
    fn recommendations_need_support() {
        let taxonomy = crate::config::default_taxonomy();
        let evs = unmatched("hr", "travel.request", 5);
        let recs = recommend_rules("u1", &evs, 5, &taxonomy);
        assert_eq!(recs.len(), 1);
        assert!(!recs[0].enabled);
        assert_eq!(recs[0].created_by, RuleOrigin::Recommendation);
        assert_eq!(recs[0].matcher.source.as_deref(), Some("hr"));
        assert_eq!(recs[0].assign.severity, Some(Severity::Info));

        assert!(recommend_rules("u1", &unmatched("hr", "x", 4), 5, &taxonomy).is_empty());

        let mut evs = unmatched("a", "small", 5);
        evs.extend(unmatched("b", "big", 7));
        let recs = recommend_rules("u1", &evs, 5, &taxonomy);
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].matcher.source.as_deref(), Some("b"));
    }

    #[test]
    fn pending_estimate_examples() {
        let now = t0();
        assert_eq!(estimate_pending(&[1, 2, 3], now + Duration::days(3), now).expected, 6);
        assert_eq!(estimate_pending(&[1, 2, 3], now - Duration::days(1), now).expected, 0);
        let empty = estimate_pending(&[], now + Duration::days(3), now);
        assert_eq!(empty.expected, 0);
        assert!(empty.note.is_some());
    }

    proptest! {
        #[test]
        fn pending_is_monotone_in_days_left(hist in prop::collection::vec(0u32..20, 1..14), a in 0i64..1000, b in 0i64..1000) {
            let now = t0();
            let (lo, hi) = (a.min(b), a.max(b));
            let e_lo = estimate_pending(&hist, now + Duration::hours(lo), now).expected;
            let e_hi = estimate_pending(&hist, now + Duration::hours(hi), now).expected;
            prop_assert!(e_lo <= e_hi);
        }
    }

    #[test]
    fn history_window() {
        let mut h = ClusterHistory::default();
        assert!(h.trailing(100, 14).is_empty());
        h.seed(&[1, 2, 3], 100);
        assert_eq!(h.trailing(100, 14), vec![1, 2, 3]);
        h.record(100);
        h.record(100);
        assert_eq!(h.trailing(101, 14), vec![1, 2, 3, 2]);
        assert_eq!(h.trailing(101, 2), vec![3, 2]);
    }
}
