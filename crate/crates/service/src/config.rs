//! Service configuration: a TOML file, then `NOTIGATE_<SECTION>__<KEY>`
//! environment overrides, then command-line flags.

use std::path::{Path, PathBuf};

use notigate_core::config::GatewayConfig;
use notigate_core::store::StoreConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_PREFIX: &str = "NOTIGATE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceSection {
    pub listen: String,
    pub data_dir: PathBuf,
    /// Static bearer token; when set every `/api/v1` route except health requires it.
    pub api_token: Option<String>,
    pub tick_interval_ms: u64,
    pub snapshot_every: u64,
    pub fsync: bool,
    /// Timeout for outbound webhook calls and poll requests.
    pub http_timeout_secs: u64,
    /// Pacing for replay watchers; 0 replays as fast as possible.
    pub replay_speed: f64,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("data"),
            api_token: None,
            tick_interval_ms: 1000,
            snapshot_every: 1000,
            fsync: true,
            http_timeout_secs: 10,
            replay_speed: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub service: ServiceSection,
    #[serde(flatten)]
    pub gateway: GatewayConfig,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {0}: {1}")]
    Read(PathBuf, std::io::Error),
    #[error("parsing config: {0}")]
    Parse(String),
    #[error("environment override {0}: {1}")]
    Env(String, String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ServiceConfig {
    pub fn store(&self) -> StoreConfig {
        StoreConfig {
            data_dir: self.service.data_dir.clone(),
            snapshot_every: self.service.snapshot_every,
            fsync: self.service.fsync,
        }
    }

    /// Loads the optional file and applies overrides from `env`.
    pub fn load<I>(path: Option<&Path>, env: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| ConfigError::Read(p.to_path_buf(), e))?,
            None => String::new(),
        };
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        overrides.sort();
        for (key, value) in overrides {
            apply_override(&mut table, &key, &value)?;
        }
        let cfg: ServiceConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for w in &self.gateway.watchers {
            w.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.gateway
            .learning
            .rewards
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.service.tick_interval_ms == 0 {
            return Err(ConfigError::Invalid("service.tick_interval_ms must be positive".into()));
        }
        Ok(())
    }
}

/// `NOTIGATE_TRIAGE__WINDOW_LENGTH_SECS=600` sets `triage.window_length_secs`.
/// Values are read as TOML scalars and fall back to plain strings.
fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<(), ConfigError> {
    let path: Vec<String> = key[ENV_PREFIX.len()..]
        .split("__")
        .map(str::to_ascii_lowercase)
        .collect();
    if path.iter().any(String::is_empty) {
        return Err(ConfigError::Env(key.into(), "empty path segment".into()));
    }
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let (last, parents) = path.split_last().expect("non-empty");
    let mut node = table;
    for seg in parents {
        let entry = node
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Env(key.into(), format!("`{seg}` is not a section")))?;
    }
    node.insert(last.clone(), parsed);
    Ok(())
}
