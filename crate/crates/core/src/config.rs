//! Tunables for every component, with the defaults the gateway ships with.
//!
//! Durations are whole seconds so the same keys work unchanged in TOML files
//! and environment overrides.

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::alerts::TaxonomyEntry;
use crate::ingestion::WatcherConfig;
use crate::learning::RewardTable;
use crate::model::{Channel, Criticality, DurationKind, Severity};
use crate::time::secs;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub ingestion: IngestionConfig,
    pub alerts: AlertConfig,
    pub triage: TriageConfig,
    pub learning: LearningConfig,
    pub users: UserModelConfig,
    pub notifier: NotifierConfig,
    /// Declared watchers besides the implicit `webhook` push endpoint.
    pub watchers: Vec<WatcherConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestionConfig {
    pub rate_beta: f64,
    pub rate_window_secs: u64,
    pub target_events_per_poll: f64,
    pub rate_floor: f64,
    pub min_poll_secs: u64,
    pub max_poll_secs: u64,
}

impl Default for IngestionConfig {
    fn default() -> Self {
        Self {
            rate_beta: 0.2,
            rate_window_secs: 60,
            target_events_per_poll: 1.0,
            rate_floor: 1e-6,
            min_poll_secs: 1,
            max_poll_secs: 3600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlertConfig {
    pub cluster_threshold: f64,
    pub min_support: usize,
    pub history_days: u32,
    /// Unmatched events remembered per user for rule recommendations.
    pub unmatched_capacity: usize,
    pub taxonomy: Vec<TaxonomyEntry>,
}

impl Default for AlertConfig {
    fn default() -> Self {
        Self {
            cluster_threshold: 0.5,
            min_support: 5,
            history_days: 14,
            unmatched_capacity: 1000,
            taxonomy: default_taxonomy(),
        }
    }
}

pub fn default_taxonomy() -> Vec<TaxonomyEntry> {
    vec![
        TaxonomyEntry {
            prefix: "deadline".into(),
            severity: Some(Severity::Warning),
            criticality: Some(Criticality::NonCritical),
            urgency: Some(0.6),
            duration: Some(DurationKind::OneShot),
        },
        TaxonomyEntry {
            prefix: "price".into(),
            severity: Some(Severity::Info),
            criticality: Some(Criticality::NonCritical),
            urgency: Some(0.4),
            duration: Some(DurationKind::Repeated),
        },
        TaxonomyEntry {
            prefix: "travel.request".into(),
            severity: Some(Severity::Info),
            criticality: Some(Criticality::NonCritical),
            urgency: Some(0.3),
            duration: Some(DurationKind::OneShot),
        },
        TaxonomyEntry {
            prefix: "heartbeat".into(),
            severity: Some(Severity::NotAvailable),
            criticality: Some(Criticality::NonCritical),
            urgency: Some(0.0),
            duration: Some(DurationKind::Repeated),
        },
        TaxonomyEntry {
            prefix: "security".into(),
            severity: Some(Severity::Error),
            criticality: Some(Criticality::Critical),
            urgency: Some(0.9),
            duration: Some(DurationKind::OneShot),
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    #[default]
    Baseline,
    Learned,
}

impl std::str::FromStr for PolicyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(PolicyMode::Baseline),
            "learned" => Ok(PolicyMode::Learned),
            other => Err(format!("unknown policy mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriageConfig {
    pub policy_mode: PolicyMode,
    pub window_length_secs: u64,
    pub dedup_window_secs: u64,
    pub issue_urgency: f64,
    /// How long before an alert's due date its digest is released.
    pub deadline_lead_secs: u64,
}

impl Default for TriageConfig {
    fn default() -> Self {
        Self {
            policy_mode: PolicyMode::Baseline,
            window_length_secs: 4 * 3600,
            dedup_window_secs: 30 * 60,
            issue_urgency: 0.8,
            deadline_lead_secs: 24 * 3600,
        }
    }
}

impl TriageConfig {
    pub fn window_length(&self) -> Duration {
        secs(self.window_length_secs)
    }

    pub fn dedup_window(&self) -> Duration {
        secs(self.dedup_window_secs)
    }

    pub fn deadline_lead(&self) -> Duration {
        secs(self.deadline_lead_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningConfig {
    pub initial_epsilon: f64,
    pub epsilon_decay: f64,
    pub epsilon_floor: f64,
    pub learning_rate: f64,
    /// Mixed with each user id to seed that user's exploration stream.
    pub seed: u64,
    pub ignored_ttl_secs: u64,
    pub rewards: RewardTable,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            initial_epsilon: 1.0,
            epsilon_decay: 0.999,
            epsilon_floor: 0.02,
            learning_rate: 0.05,
            seed: 0x5eed,
            ignored_ttl_secs: 24 * 3600,
            rewards: RewardTable::default(),
        }
    }
}

impl LearningConfig {
    pub fn ignored_ttl(&self) -> Duration {
        secs(self.ignored_ttl_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UserModelConfig {
    pub availability_threshold: f64,
    pub max_defer_secs: u64,
    pub default_channel_order: Vec<Channel>,
}

impl Default for UserModelConfig {
    fn default() -> Self {
        Self {
            availability_threshold: 0.6,
            max_defer_secs: 24 * 3600,
            default_channel_order: vec![Channel::Console],
        }
    }
}

impl UserModelConfig {
    pub fn max_defer(&self) -> Duration {
        secs(self.max_defer_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NotifierConfig {
    pub ack_timeout_secs: u64,
    pub max_attempts: u32,
    /// Delay before a failed channel attempt is retried on the next channel.
    pub retry_backoff_secs: u64,
}

impl Default for NotifierConfig {
    fn default() -> Self {
        Self {
            ack_timeout_secs: 15 * 60,
            max_attempts: 3,
            retry_backoff_secs: 60,
        }
    }
}

impl NotifierConfig {
    pub fn ack_timeout(&self) -> Duration {
        secs(self.ack_timeout_secs)
    }

    pub fn retry_backoff(&self) -> Duration {
        secs(self.retry_backoff_secs)
    }
}
