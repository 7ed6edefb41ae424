//! Background work: the tick loop, adaptive pollers and file replayers.

use std::sync::Arc;
use std::time::Duration;

use notigate_core::config::IngestionConfig;
use notigate_core::gateway::Command;
use notigate_core::ingestion::{poll_interval, replay_file, update_rate, RateEstimate, WatcherConfig, WatcherKind};
use notigate_core::store::StoreError;
use serde_json::Value;
use tokio::task::JoinHandle;

use crate::app::App;

pub fn spawn_ticker(app: Arc<App>, every: Duration) -> JoinHandle<()> {
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(every);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            interval.tick().await;
            let app = app.clone();
            match tokio::task::spawn_blocking(move || app.tick_if_due()).await {
                Ok(Ok(Some(s))) if !s.is_idle() => tracing::debug!(?s, "tick"),
                Ok(Err(e)) => tracing::error!(error = %e, "tick failed"),
                Err(e) => tracing::error!(error = %e, "tick task panicked"),
                _ => {}
            }
        }
    })
}

fn ingest(app: &App, watcher_id: &str, doc: &Value) -> Result<(), StoreError> {
    app.submit(Command::Ingest {
        watcher_id: Some(watcher_id.to_string()),
        event: doc.clone(),
        received_at: app.now(),
    })
    .map(|_| ())
}

/// Fetches one batch from a poll endpoint, which answers with a JSON array
/// of event documents.
pub fn fetch_batch(agent: &ureq::Agent, endpoint: &str) -> Result<Vec<Value>, String> {
    let mut resp = agent.get(endpoint).call().map_err(|e| e.to_string())?;
    let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
    let body: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    match body {
        Value::Array(items) => Ok(items),
        _ => Err("poll endpoint must return a JSON array".into()),
    }
}

/// Next wait for a poller: the rate-derived interval, never longer than the
/// configured base interval.
pub fn next_poll_delay(estimate: &RateEstimate, base: Duration, cfg: &IngestionConfig) -> Duration {
    poll_interval(estimate, cfg).min(base)
}

pub fn spawn_watchers(app: Arc<App>, watchers: &[WatcherConfig], cfg: &IngestionConfig, http_timeout: Duration, replay_speed: f64) -> Vec<JoinHandle<()>> {
    let mut handles = Vec::new();
    for w in watchers.iter().filter(|w| w.enabled) {
        let app = app.clone();
        let id = w.watcher_id.clone();
        match &w.kind {
            WatcherKind::Webhook => {}
            WatcherKind::Replay { path } => {
                let path = path.clone();
                handles.push(tokio::task::spawn_blocking(move || {
                    match replay_file(&path, replay_speed, |doc| ingest(&app, &id, doc)) {
                        Ok(r) => tracing::info!(watcher = %id, accepted = r.accepted, rejected = r.rejected.len(), "replay finished"),
                        Err(e) => tracing::error!(watcher = %id, error = %e, "replay failed"),
                    }
                }));
            }
            WatcherKind::Poll { endpoint } => {
                let endpoint = endpoint.clone();
                let base = Duration::from_secs(w.base_interval_secs.unwrap_or(60));
                let cfg = cfg.clone();
                handles.push(tokio::spawn(async move {
                    let agent: ureq::Agent = ureq::Agent::config_builder()
                        .timeout_global(Some(http_timeout))
                        .build()
                        .into();
                    let mut estimate = RateEstimate {
                        source_id: id.clone(),
                        ewma_rate: 0.0,
                        last_updated: app.now(),
                        beta: cfg.rate_beta,
                    };
                    loop {
                        let (a, e, ap, wid) = (agent.clone(), endpoint.clone(), app.clone(), id.clone());
                        let result = tokio::task::spawn_blocking(move || {
                            let batch = fetch_batch(&a, &e)?;
                            for doc in &batch {
                                if let Err(err) = ingest(&ap, &wid, doc) {
                                    tracing::warn!(watcher = %wid, error = %err, "polled event rejected");
                                }
                            }
                            Ok::<usize, String>(batch.len())
                        })
                        .await;
                        let now = app.now();
                        match result {
                            Ok(Ok(n)) => {
                                // A zero-length window leaves the estimate as it was.
                                if let Ok(e) = update_rate(&estimate, n as u64, now - estimate.last_updated, now) {
                                    estimate = e;
                                } else {
                                    estimate.last_updated = now;
                                }
                            }
                            Ok(Err(e)) => tracing::warn!(watcher = %id, error = %e, "poll failed"),
                            Err(e) => tracing::error!(watcher = %id, error = %e, "poll task panicked"),
                        }
                        tokio::time::sleep(next_poll_delay(&estimate, base, &cfg)).await;
                    }
                }));
            }
        }
    }
    handles
}
