//! Event watchers and the per-source arrival-rate model that tunes how often
//! pollers observe their endpoint.

use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use chrono::Duration;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::config::IngestionConfig;
use crate::model::ValidationError;
use crate::time::{parse_rfc3339, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WatcherKind {
    Webhook,
    Poll { endpoint: String },
    Replay { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatcherConfig {
    pub watcher_id: String,
    pub kind: WatcherKind,
    /// Poll watchers only.
    #[serde(default)]
    pub base_interval_secs: Option<u64>,
    #[serde(default = "enabled_by_default")]
    pub enabled: bool,
}

fn enabled_by_default() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WatcherConfigError {
    #[error("poll watcher `{0}` needs a positive base interval")]
    NonPositiveInterval(String),
    #[error("poll watcher `{0}` has an invalid endpoint url")]
    InvalidEndpoint(String),
    #[error("replay watcher `{0}` cannot read {1}")]
    UnreadableReplay(String, PathBuf),
}

impl WatcherConfig {
    pub fn webhook(watcher_id: impl Into<String>) -> Self {
        Self {
            watcher_id: watcher_id.into(),
            kind: WatcherKind::Webhook,
            base_interval_secs: None,
            enabled: true,
        }
    }

    /// Checks the start-time invariants of the watcher.
    pub fn validate(&self) -> Result<(), WatcherConfigError> {
        match &self.kind {
            WatcherKind::Webhook => Ok(()),
            WatcherKind::Poll { endpoint } => {
                if !matches!(self.base_interval_secs, Some(n) if n > 0) {
                    return Err(WatcherConfigError::NonPositiveInterval(self.watcher_id.clone()));
                }
                url::Url::parse(endpoint)
                    .map(|_| ())
                    .map_err(|_| WatcherConfigError::InvalidEndpoint(self.watcher_id.clone()))
            }
            // A disabled replay watcher may point at a file that is not there yet.
            WatcherKind::Replay { .. } if !self.enabled => Ok(()),
            WatcherKind::Replay { path } => File::open(path)
                .map(|_| ())
                .map_err(|_| WatcherConfigError::UnreadableReplay(self.watcher_id.clone(), path.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IngestError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("watcher `{0}` is disabled")]
    DisabledWatcher(String),
    #[error("unknown watcher `{0}`")]
    UnknownWatcher(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub source_id: String,
    /// Events per second.
    pub ewma_rate: f64,
    pub last_updated: Timestamp,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("observation window must be positive")]
pub struct NonPositiveWindow;

/// Folds one window's observed count into the estimate:
/// `rate' = (1 - beta) * rate + beta * count / window_seconds`.
pub fn update_rate(
    estimate: &RateEstimate,
    observed_count: u64,
    window: Duration,
    at: Timestamp,
) -> Result<RateEstimate, NonPositiveWindow> {
    let window_secs = window.num_milliseconds() as f64 / 1000.0;
    if window_secs <= 0.0 {
        return Err(NonPositiveWindow);
    }
    let observed = observed_count as f64 / window_secs;
    Ok(RateEstimate {
        ewma_rate: (1.0 - estimate.beta) * estimate.ewma_rate + estimate.beta * observed,
        last_updated: at,
        ..estimate.clone()
    })
}

/// Interval that yields about `target_events_per_poll` events per poll,
/// clamped to `[min_poll, max_poll]`.
pub fn poll_interval(estimate: &RateEstimate, cfg: &IngestionConfig) -> std::time::Duration {
    poll_interval_for_rate(estimate.ewma_rate, cfg)
}

pub fn poll_interval_for_rate(rate: f64, cfg: &IngestionConfig) -> std::time::Duration {
    let raw = cfg.target_events_per_poll / rate.max(cfg.rate_floor);
    let clamped = raw.clamp(cfg.min_poll_secs as f64, cfg.max_poll_secs as f64);
    std::time::Duration::from_secs_f64(clamped)
}

// Beyond this many consecutive empty windows the estimate is zero in f64 anyway.
const MAX_EMPTY_FOLDS: i64 = 4096;

/// Tumbling-window counter feeding [`update_rate`] for one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTracker {
    pub estimate: RateEstimate,
    window_start: Timestamp,
    count_in_window: u64,
}

impl RateTracker {
    pub fn new(source_id: impl Into<String>, beta: f64, at: Timestamp) -> Self {
        Self {
            estimate: RateEstimate {
                source_id: source_id.into(),
                ewma_rate: 0.0,
                last_updated: at,
                beta,
            },
            window_start: at,
            count_in_window: 0,
        }
    }

    /// Records one event at `at`, closing any windows that ended before it.
    pub fn observe(&mut self, at: Timestamp, window: Duration) {
        self.roll(at, window);
        self.count_in_window += 1;
    }

    /// Closes every window that ended at or before `at`.
    pub fn roll(&mut self, at: Timestamp, window: Duration) {
        let window_ms = window.num_milliseconds();
        if window_ms <= 0 {
            return;
        }
        let elapsed = (at - self.window_start).num_milliseconds();
        if elapsed < window_ms {
            return;
        }
        let closed = elapsed / window_ms;
        let first_end = self.window_start + window;
        self.estimate = update_rate(&self.estimate, self.count_in_window, window, first_end)
            .expect("window checked positive");
        for _ in 1..closed.min(MAX_EMPTY_FOLDS) {
            self.estimate = update_rate(&self.estimate, 0, window, first_end)
                .expect("window checked positive");
        }
        if closed > MAX_EMPTY_FOLDS {
            self.estimate.ewma_rate = 0.0;
        }
        self.window_start += Duration::milliseconds(closed * window_ms);
        self.estimate.last_updated = self.window_start;
        self.count_in_window = 0;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ReplayReport {
    pub accepted: usize,
    pub rejected: Vec<RejectedLine>,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay file {0} not found")]
    FileNotFound(PathBuf),
    #[error("replay input is not sorted by occurred_at (first offending line {line})")]
    UnsortedInput { line: usize },
    #[error("reading replay file: {0}")]
    Io(#[from] io::Error),
}

/// Feeds a newline-delimited event file through `ingest`.
///
/// The whole file is checked for `occurred_at` ordering before anything is
/// ingested. `speed` paces delivery relative to the recorded gaps; `0` means
/// as fast as possible.
pub fn replay_file<F, E>(path: &Path, speed: f64, mut ingest: F) -> Result<ReplayReport, ReplayError>
where
    F: FnMut(&Value) -> Result<(), E>,
    E: std::fmt::Display,
{
    let file = File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => ReplayError::FileNotFound(path.to_path_buf()),
        _ => ReplayError::Io(e),
    })?;

    let mut lines = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        lines.push((idx + 1, line));
    }

    let parsed: Vec<(usize, Result<Value, String>)> = lines
        .into_iter()
        .map(|(no, text)| (no, serde_json::from_str::<Value>(&text).map_err(|e| e.to_string())))
        .collect();

    let occurred = |doc: &Value| -> Option<Timestamp> {
        doc.get("occurred_at")
            .and_then(Value::as_str)
            .and_then(|s| parse_rfc3339(s).ok())
    };

    let mut last: Option<Timestamp> = None;
    for (no, doc) in &parsed {
        if let Some(t) = doc.as_ref().ok().and_then(occurred) {
            if matches!(last, Some(prev) if t < prev) {
                return Err(ReplayError::UnsortedInput { line: *no });
            }
            last = Some(t);
        }
    }

    let mut report = ReplayReport::default();
    let mut paced_from: Option<Timestamp> = None;
    for (no, doc) in parsed {
        let doc = match doc {
            Ok(doc) => doc,
            Err(reason) => {
                report.rejected.push(RejectedLine { line: no, reason });
                continue;
            }
        };
        if speed > 0.0 {
            if let Some(t) = occurred(&doc) {
                if let Some(prev) = paced_from {
                    let gap = (t - prev).to_std().unwrap_or_default();
                    std::thread::sleep(gap.div_f64(speed));
                }
                paced_from = Some(t);
            }
        }
        match ingest(&doc) {
            Ok(()) => report.accepted += 1,
            Err(e) => report.rejected.push(RejectedLine {
                line: no,
                reason: e.to_string(),
            }),
        }
    }
    Ok(report)
}
