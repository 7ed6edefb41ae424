//! Synthetic event workloads: independent Poisson sources.

use std::collections::BTreeMap;

use chrono::Duration;
use notigate_core::model::{Criticality, DurationKind, Severity};
use notigate_core::time::{format_rfc3339, Timestamp};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub source_id: String,
    pub event_type: String,
    /// Events per hour.
    pub poisson_rate: f64,
    pub severity_mix: BTreeMap<Severity, f64>,
    #[serde(default)]
    pub critical_prob: f64,
    #[serde(default = "default_urgency")]
    pub urgency: f64,
    #[serde(default = "default_duration")]
    pub duration: DurationKind,
}

fn default_urgency() -> f64 {
    0.5
}

fn default_duration() -> DurationKind {
    DurationKind::OneShot
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub sources: Vec<SourceSpec>,
    /// Simulated days.
    pub duration: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error("source `{0}` has a negative or non-finite rate")]
    BadRate(String),
    #[error("severity mix of `{0}` must be non-negative and sum to 1")]
    BadMix(String),
    #[error("critical_prob of `{0}` must lie in [0, 1]")]
    BadCriticalProb(String),
    #[error("urgency of `{0}` must lie in [0, 1]")]
    BadUrgency(String),
    #[error("duration must be a non-negative number of days")]
    BadDuration,
}

impl Workload {
    pub fn empty(seed: u64) -> Self {
        Self {
            sources: Vec::new(),
            duration: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return Err(WorkloadError::BadDuration);
        }
        for s in &self.sources {
            let id = || s.source_id.clone();
            if !(s.poisson_rate.is_finite() && s.poisson_rate >= 0.0) {
                return Err(WorkloadError::BadRate(id()));
            }
            let total: f64 = s.severity_mix.values().sum();
            if s.severity_mix.values().any(|p| !(p.is_finite() && *p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(WorkloadError::BadMix(id()));
            }
            if !(0.0..=1.0).contains(&s.critical_prob) {
                return Err(WorkloadError::BadCriticalProb(id()));
            }
            if !(0.0..=1.0).contains(&s.urgency) {
                return Err(WorkloadError::BadUrgency(id()));
            }
        }
        Ok(())
    }
}

/// One generated event with the dimensions the simulator's rules assign.
#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub at: Timestamp,
    pub source_index: usize,
    pub severity: Severity,
    pub criticality: Criticality,
    pub document: Value,
}

/// Tag carried by generated events so per-user rules can assign the sampled
/// severity and criticality.
pub fn dims_tag(severity: Severity, criticality: Criticality) -> String {
    let c = match criticality {
        Criticality::Critical => "critical",
        Criticality::NonCritical => "non_critical",
    };
    format!("dims:{}:{c}", severity.as_str())
}

/// Each source draws from its own stream so adding a source leaves the others
/// unchanged.
fn source_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Poisson arrivals per source over `duration` days from `start`, merged and
/// sorted by time (source order breaks ties).
pub fn generate_workload(w: &Workload, start: Timestamp) -> Vec<SimEvent> {
    let end = start + Duration::milliseconds((w.duration * 86_400_000.0) as i64);
    let mut events = Vec::new();
    for (i, s) in w.sources.iter().enumerate() {
        if s.poisson_rate <= 0.0 {
            continue;
        }
        let mut rng = source_rng(w.seed, i);
        let gap = Exp::new(s.poisson_rate / 3600.0).expect("positive rate");
        let severities: Vec<(Severity, f64)> = s.severity_mix.iter().map(|(k, v)| (*k, *v)).collect();
        let pick = WeightedIndex::new(severities.iter().map(|(_, p)| *p)).expect("validated mix");
        let mut t = start;
        let mut n = 0u64;
        loop {
            let secs: f64 = gap.sample(&mut rng);
            t += Duration::milliseconds((secs * 1000.0).round() as i64);
            if t >= end {
                break;
            }
            n += 1;
            let severity = severities[pick.sample(&mut rng)].0;
            let criticality = if rng.random::<f64>() < s.critical_prob {
                Criticality::Critical
            } else {
                Criticality::NonCritical
            };
            let document = json!({
                "source": s.source_id,
                "type": s.event_type,
                "tags": [dims_tag(severity, criticality)],
                "payload": {"message": format!("{} #{n}", s.event_type)},
                "occurred_at": format_rfc3339(t),
            });
            events.push(SimEvent {
                at: t,
                source_index: i,
                severity,
                criticality,
                document,
            });
        }
    }
    events.sort_by_key(|e| (e.at, e.source_index));
    events
}
