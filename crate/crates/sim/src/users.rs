//! Synthetic users whose engagement drops as interruptions pile up.

use std::collections::BTreeSet;

use chrono::Duration;
use notigate_core::model::Signal;
use notigate_core::time::{hour_of_week, Timestamp, HOURS_PER_WEEK};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Weekly recurring active hours, e.g. Monday to Friday 9 to 18.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    /// 0 is Monday.
    pub days: Vec<u8>,
    pub from_hour: u8,
    /// Exclusive.
    pub to_hour: u8,
}

impl Schedule {
    pub fn bins(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for &d in &self.days {
            for h in self.from_hour..self.to_hour {
                out.insert(d as usize * 24 + h as usize);
            }
        }
        out
    }

    pub fn contains(&self, bin: usize) -> bool {
        let (day, hour) = (bin / 24, bin % 24);
        self.days.iter().any(|&d| d as usize == day) && (self.from_hour as usize..self.to_hour as usize).contains(&hour)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUser {
    pub user_id: String,
    #[serde(default)]
    pub active_bins: BTreeSet<usize>,
    /// Added to `active_bins`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_hours: Option<Schedule>,
    #[serde(default = "default_base_engage")]
    pub base_engage: f64,
    #[serde(default = "default_kappa")]
    pub fatigue_kappa: f64,
    #[serde(default)]
    pub rng_seed: u64,
    /// Source ids this user has rules for; all sources when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subscriptions: Option<Vec<String>>,
}

fn default_base_engage() -> f64 {
    0.9
}

fn default_kappa() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UserError {
    #[error("base_engage of `{0}` must lie in (0, 1]")]
    BaseEngage(String),
    #[error("fatigue_kappa of `{0}` must be non-negative")]
    Kappa(String),
    #[error("active hour {1} of `{0}` is outside the week")]
    Bin(String, usize),
}

impl SyntheticUser {
    pub fn new(user_id: impl Into<String>, active: BTreeSet<usize>) -> Self {
        Self {
            user_id: user_id.into(),
            active_bins: active,
            active_hours: None,
            base_engage: default_base_engage(),
            fatigue_kappa: default_kappa(),
            rng_seed: 0,
            subscriptions: None,
        }
    }

    pub fn validate(&self) -> Result<(), UserError> {
        if !(self.base_engage > 0.0 && self.base_engage <= 1.0) {
            return Err(UserError::BaseEngage(self.user_id.clone()));
        }
        if !(self.fatigue_kappa.is_finite() && self.fatigue_kappa >= 0.0) {
            return Err(UserError::Kappa(self.user_id.clone()));
        }
        if let Some(&b) = self.active().iter().find(|&&b| b >= HOURS_PER_WEEK) {
            return Err(UserError::Bin(self.user_id.clone(), b));
        }
        Ok(())
    }

    pub fn active(&self) -> BTreeSet<usize> {
        let mut bins = self.active_bins.clone();
        if let Some(s) = &self.active_hours {
            bins.extend(s.bins());
        }
        bins
    }

    pub fn is_active(&self, at: Timestamp) -> bool {
        let h = hour_of_week(at, 0);
        self.active_bins.contains(&h) || self.active_hours.as_ref().is_some_and(|s| s.contains(h))
    }

    pub fn subscribes_to(&self, source_id: &str) -> bool {
        self.subscriptions.as_ref().is_none_or(|s| s.iter().any(|x| x == source_id))
    }

    pub fn p_engage(&self, at: Timestamp, interruptions_last_hour: u32) -> f64 {
        let active = if self.is_active(at) { 1.0 } else { 0.0 };
        self.base_engage * active * (-self.fatigue_kappa * interruptions_last_hour as f64).exp()
    }
}

/// What a user does with one delivered notification. `Ignored` means no
/// reaction at all; the gateway infers it when the feedback TTL runs out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserResponse {
    pub signal: Signal,
    pub at: Timestamp,
}

pub const IMMEDIATE_WINDOW_SECS: i64 = 60;
const LATER_MEAN_SECS: f64 = 1800.0;
const LATER_CAP_SECS: i64 = 8 * 3600;

pub fn simulate_user_response<R: Rng>(
    user: &SyntheticUser,
    rng: &mut R,
    sent_at: Timestamp,
    interruptions_last_hour: u32,
) -> UserResponse {
    let p = user.p_engage(sent_at, interruptions_last_hour);
    // All three draws happen every time so a user's stream advances the same
    // way whatever the outcome.
    let engaged = rng.random::<f64>() < p;
    let immediate = rng.random::<f64>() < 0.8;
    let delay_draw: f64 = rng.random();
    if !engaged {
        return UserResponse {
            signal: Signal::Ignored,
            at: sent_at,
        };
    }
    if immediate {
        let secs = 1 + (delay_draw * (IMMEDIATE_WINDOW_SECS - 1) as f64) as i64;
        UserResponse {
            signal: Signal::OpenedImmediately,
            at: sent_at + Duration::seconds(secs),
        }
    } else {
        // Exponential delay by inverse CDF, so the draw count stays fixed.
        let secs = (-(1.0 - delay_draw).ln() * LATER_MEAN_SECS).min(LATER_CAP_SECS as f64) as i64;
        UserResponse {
            signal: Signal::OpenedLater,
            at: sent_at + Duration::seconds(IMMEDIATE_WINDOW_SECS + 1 + secs),
        }
    }
}
