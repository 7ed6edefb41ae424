//! Per-user availability learned from engagement times, plus the explicit
//! preferences that constrain scheduling.

use std::collections::BTreeSet;

use chrono::Duration;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Channel, ChannelError, Signal};
use crate::time::{hour_of_week, local_hour_start, Timestamp, HOURS_PER_WEEK};

/// Engagement counts per local hour-of-week (Monday 00:00 is bin 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHistogram")]
pub struct AvailabilityHistogram {
    pub user_id: String,
    engaged: Vec<u32>,
    seen: Vec<u32>,
    pub timezone_offset_minutes: i32,
}

#[derive(Deserialize)]
struct RawHistogram {
    user_id: String,
    engaged: Vec<u32>,
    seen: Vec<u32>,
    timezone_offset_minutes: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HistogramError {
    #[error("histogram needs exactly {HOURS_PER_WEEK} bins, got {0}")]
    BinCount(usize),
    #[error("bin {0} has more engagements than observations")]
    EngagedExceedsSeen(usize),
}

impl TryFrom<RawHistogram> for AvailabilityHistogram {
    type Error = HistogramError;

    fn try_from(raw: RawHistogram) -> Result<Self, Self::Error> {
        for v in [&raw.engaged, &raw.seen] {
            if v.len() != HOURS_PER_WEEK {
                return Err(HistogramError::BinCount(v.len()));
            }
        }
        if let Some(h) = (0..HOURS_PER_WEEK).find(|&h| raw.engaged[h] > raw.seen[h]) {
            return Err(HistogramError::EngagedExceedsSeen(h));
        }
        Ok(Self {
            user_id: raw.user_id,
            engaged: raw.engaged,
            seen: raw.seen,
            timezone_offset_minutes: raw.timezone_offset_minutes,
        })
    }
}

impl AvailabilityHistogram {
    pub fn new(user_id: impl Into<String>, timezone_offset_minutes: i32) -> Self {
        Self {
            user_id: user_id.into(),
            engaged: vec![0; HOURS_PER_WEEK],
            seen: vec![0; HOURS_PER_WEEK],
            timezone_offset_minutes,
        }
    }

    pub fn engaged(&self) -> &[u32] {
        &self.engaged
    }

    pub fn seen(&self) -> &[u32] {
        &self.seen
    }

    pub fn bin(&self, at: Timestamp) -> usize {
        hour_of_week(at, self.timezone_offset_minutes)
    }

    pub fn record_engagement(&mut self, signal: Signal, at: Timestamp) {
        let h = self.bin(at);
        self.seen[h] = self.seen[h].saturating_add(1);
        if signal.is_engagement() {
            self.engaged[h] = self.engaged[h].saturating_add(1).min(self.seen[h]);
        }
    }

    /// Laplace-smoothed engagement probability of one bin.
    pub fn bin_score(&self, h: usize) -> f64 {
        (self.engaged[h] as f64 + 1.0) / (self.seen[h] as f64 + 2.0)
    }

    pub fn availability_score(&self, at: Timestamp) -> f64 {
        self.bin_score(self.bin(at))
    }

    pub fn scores(&self) -> Vec<f64> {
        (0..HOURS_PER_WEEK).map(|h| self.bin_score(h)).collect()
    }

    /// Earliest instant at or after `now` whose bin clears the threshold and
    /// is not a quiet hour. Falls back to `now + max_defer` when no bin in the
    /// coming week qualifies.
    pub fn next_available_slot(&self, prefs: &Preferences, now: Timestamp, max_defer: Duration) -> Timestamp {
        let qualifies = |h: usize| self.bin_score(h) >= prefs.availability_threshold && !prefs.quiet_hours.contains(&h);
        if qualifies(self.bin(now)) {
            return now;
        }
        let start = local_hour_start(now, self.timezone_offset_minutes);
        (1..HOURS_PER_WEEK as i64)
            .map(|k| start + Duration::hours(k))
            .find(|&t| qualifies(self.bin(t)))
            .unwrap_or(now + max_defer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preferences {
    pub user_id: String,
    /// First entry is the preferred channel; escalation walks down the list.
    pub channel_order: Vec<Channel>,
    #[serde(default)]
    pub quiet_hours: BTreeSet<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest_window_length_secs: Option<u64>,
    pub availability_threshold: f64,
    #[serde(default)]
    pub timezone_offset_minutes: i32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PreferencesError {
    #[error("channel_order must not be empty")]
    EmptyChannelOrder,
    #[error("availability_threshold {0} must lie strictly between 0 and 1")]
    ThresholdOutOfRange(f64),
    #[error("quiet hour {0} is not a valid hour-of-week bin")]
    QuietHourOutOfRange(usize),
    #[error("timezone offset {0} minutes is out of range")]
    OffsetOutOfRange(i32),
    #[error("digest window length must be positive")]
    ZeroWindow,
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

impl Preferences {
    pub fn defaults(user_id: impl Into<String>, cfg: &crate::config::UserModelConfig) -> Self {
        Self {
            user_id: user_id.into(),
            channel_order: cfg.default_channel_order.clone(),
            quiet_hours: BTreeSet::new(),
            digest_window_length_secs: None,
            availability_threshold: cfg.availability_threshold,
            timezone_offset_minutes: 0,
        }
    }

    pub fn validate(&self) -> Result<(), PreferencesError> {
        if self.channel_order.is_empty() {
            return Err(PreferencesError::EmptyChannelOrder);
        }
        for c in &self.channel_order {
            c.validate()?;
        }
        let tau = self.availability_threshold;
        if !(tau > 0.0 && tau < 1.0) {
            return Err(PreferencesError::ThresholdOutOfRange(tau));
        }
        if let Some(&h) = self.quiet_hours.iter().find(|&&h| h >= HOURS_PER_WEEK) {
            return Err(PreferencesError::QuietHourOutOfRange(h));
        }
        if self.timezone_offset_minutes.abs() > 14 * 60 {
            return Err(PreferencesError::OffsetOutOfRange(self.timezone_offset_minutes));
        }
        if self.digest_window_length_secs == Some(0) {
            return Err(PreferencesError::ZeroWindow);
        }
        Ok(())
    }

    /// Channel for a zero-based attempt index, saturating at the last entry.
    pub fn preferred_channel(&self, attempt_index: usize) -> Channel {
        let last = self.channel_order.len().saturating_sub(1);
        self.channel_order
            .get(attempt_index.min(last))
            .cloned()
            .unwrap_or(Channel::Console)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    fn monday(h: u32, m: u32) -> Timestamp {
        Utc.with_ymd_and_hms(2024, 1, 1, h, m, 0).unwrap()
    }

    fn prefs(tau: f64) -> Preferences {
        Preferences {
            user_id: "u".into(),
            channel_order: vec![Channel::Console],
            quiet_hours: BTreeSet::new(),
            digest_window_length_secs: None,
            availability_threshold: tau,
            timezone_offset_minutes: 0,
        }
    }

    #[test]
    fn engagement_binning() {
        let mut h = AvailabilityHistogram::new("u", 0);
        h.record_engagement(Signal::OpenedImmediately, monday(9, 30));
        assert_eq!((h.engaged()[9], h.seen()[9]), (1, 1));
        h.record_engagement(Signal::Ignored, monday(9, 30));
        assert_eq!((h.engaged()[9], h.seen()[9]), (1, 2));

        let mut tz = AvailabilityHistogram::new("u", 120);
        let sunday = Utc.with_ymd_and_hms(2024, 1, 7, 23, 30, 0).unwrap();
        tz.record_engagement(Signal::Acted, sunday);
        assert_eq!(tz.engaged()[1], 1);
    }

    #[test]
    fn smoothed_scores() {
        let h = AvailabilityHistogram::new("u", 0);
        assert!(h.scores().iter().all(|&s| s == 0.5));
        let mut h = AvailabilityHistogram::new("u", 0);
        for _ in 0..9 {
            h.record_engagement(Signal::OpenedImmediately, monday(9, 0));
        }
        for _ in 0..10 {
            h.record_engagement(Signal::Ignored, monday(10, 0));
        }
        assert!((h.bin_score(9) - 10.0 / 11.0).abs() < 1e-12);
        assert!((h.bin_score(10) - 1.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn next_slot_cases() {
        let max_defer = Duration::hours(24);
        let mut h = AvailabilityHistogram::new("u", 0);
        let p = prefs(0.6);
        for _ in 0..5 {
            h.record_engagement(Signal::OpenedImmediately, monday(13, 0));
        }
        assert_eq!(h.next_available_slot(&p, monday(13, 20), max_defer), monday(13, 20));
        assert_eq!(h.next_available_slot(&p, monday(10, 15), max_defer), monday(13, 0));

        let empty = AvailabilityHistogram::new("u", 0);
        assert_eq!(empty.next_available_slot(&p, monday(10, 15), max_defer), monday(10, 15) + max_defer);

        let mut quiet = p.clone();
        quiet.quiet_hours.insert(13);
        assert_eq!(h.next_available_slot(&quiet, monday(10, 0), max_defer), monday(10, 0) + max_defer);
    }

    #[test]
    fn channel_escalation_saturates() {
        let mut p = prefs(0.6);
        p.channel_order = vec![Channel::Console, Channel::Webhook { url: "http://h.test/x".into() }];
        assert_eq!(p.preferred_channel(0), Channel::Console);
        assert_eq!(p.preferred_channel(1).name(), "webhook");
        assert_eq!(p.preferred_channel(5).name(), "webhook");
    }

    #[test]
    fn preference_validation() {
        assert!(prefs(0.6).validate().is_ok());
        assert_eq!(prefs(1.0).validate(), Err(PreferencesError::ThresholdOutOfRange(1.0)));
        let mut p = prefs(0.6);
        p.channel_order.clear();
        assert_eq!(p.validate(), Err(PreferencesError::EmptyChannelOrder));
        let mut p = prefs(0.6);
        p.quiet_hours.insert(168);
        assert_eq!(p.validate(), Err(PreferencesError::QuietHourOutOfRange(168)));
    }

    #[test]
    fn histogram_deserialization_checks_shape() {
        let h = AvailabilityHistogram::new("u", 0);
        let mut doc = serde_json::to_value(&h).unwrap();
        assert_eq!(serde_json::from_value::<AvailabilityHistogram>(doc.clone()).unwrap(), h);
        doc["seen"] = serde_json::json!([0, 1]);
        assert!(serde_json::from_value::<AvailabilityHistogram>(doc.clone()).is_err());
        doc["seen"] = serde_json::json!(vec![0; 168]);
        doc["engaged"][3] = serde_json::json!(1);
        assert!(serde_json::from_value::<AvailabilityHistogram>(doc).is_err());
    }

    #[test]
    fn converges_to_weekday_office_hours() {
        let mut h = AvailabilityHistogram::new("u", 0);
        let inside: Vec<usize> = (0..5).flat_map(|d| (9..18).map(move |hr| d * 24 + hr)).collect();
        let outside: Vec<usize> = (0..HOURS_PER_WEEK).filter(|b| !inside.contains(b)).collect();
        let at = |bin: usize| monday(0, 0) + Duration::hours(bin as i64);
        for i in 0..200 {
            h.record_engagement(Signal::OpenedImmediately, at(inside[i % inside.len()]));
            h.record_engagement(Signal::Ignored, at(outside[i % outside.len()]));
        }
        assert!(inside.iter().all(|&b| h.bin_score(b) > 0.6));
        assert!(outside.iter().all(|&b| h.bin_score(b) < 0.6));
    }

    fn arb_signal() -> impl Strategy<Value = Signal> {
        prop::sample::select(Signal::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn scores_stay_open_interval(events in prop::collection::vec((arb_signal(), 0i64..2000), 0..300), offset in -720i32..=720) {
            let mut h = AvailabilityHistogram::new("u", offset);
            for (s, hrs) in events {
                h.record_engagement(s, monday(0, 0) + Duration::hours(hrs));
            }
            for b in 0..HOURS_PER_WEEK {
                prop_assert!(h.engaged()[b] <= h.seen()[b]);
                let s = h.bin_score(b);
                prop_assert!(s > 0.0 && s < 1.0);
            }
        }

        #[test]
        fn next_slot_never_before_now(events in prop::collection::vec((arb_signal(), 0i64..400), 0..100), now_min in 0i64..20_000, tau in 0.05f64..0.95, quiet in prop::collection::btree_set(0usize..168, 0..40)) {
            let mut h = AvailabilityHistogram::new("u", 60);
            for (s, hrs) in events {
                h.record_engagement(s, monday(0, 0) + Duration::hours(hrs));
            }
            let mut p = prefs(tau);
            p.quiet_hours = quiet;
            let now = monday(0, 0) + Duration::minutes(now_min);
            let slot = h.next_available_slot(&p, now, Duration::hours(24));
            prop_assert!(slot >= now);
            prop_assert_eq!(slot, h.next_available_slot(&p, now, Duration::hours(24)));
        }
    }
}
