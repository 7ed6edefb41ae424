//! Millisecond-precision UTC timestamps, hour-of-week arithmetic and
//! injectable clocks.
//!
//! Every component takes `now` explicitly; the only place wall time enters is
//! [`SystemClock`]. Tests and the simulator drive a [`ManualClock`].

use std::sync::{Arc, Mutex};

use chrono::{DateTime, Datelike, Duration, DurationRound, SecondsFormat, Timelike, Utc};

pub type Timestamp = DateTime<Utc>;

/// Number of hour-of-week bins; bin 0 is Monday 00:00 local time.
pub const HOURS_PER_WEEK: usize = 168;

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        truncate_millis(Utc::now())
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Clone)]
pub struct ManualClock {
    now: Arc<Mutex<Timestamp>>,
}

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        Self {
            now: Arc::new(Mutex::new(truncate_millis(start))),
        }
    }

    pub fn set(&self, at: Timestamp) {
        *self.now.lock().expect("clock poisoned") = truncate_millis(at);
    }

    pub fn advance(&self, by: Duration) {
        let mut now = self.now.lock().expect("clock poisoned");
        *now = truncate_millis(*now + by);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        *self.now.lock().expect("clock poisoned")
    }
}

pub fn truncate_millis(t: Timestamp) -> Timestamp {
    t.duration_trunc(Duration::milliseconds(1)).unwrap_or(t)
}

pub fn parse_rfc3339(s: &str) -> Result<Timestamp, chrono::ParseError> {
    DateTime::parse_from_rfc3339(s).map(|t| truncate_millis(t.with_timezone(&Utc)))
}

pub fn format_rfc3339(t: Timestamp) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Hour-of-week bin of `t` as seen by someone at `offset_minutes` from UTC.
pub fn hour_of_week(t: Timestamp, offset_minutes: i32) -> usize {
    let local = t + Duration::minutes(offset_minutes as i64);
    local.weekday().num_days_from_monday() as usize * 24 + local.hour() as usize
}

/// UTC instant at which the local hour containing `t` began.
pub fn local_hour_start(t: Timestamp, offset_minutes: i32) -> Timestamp {
    let offset = Duration::minutes(offset_minutes as i64);
    let local = t + offset;
    let floored = local.duration_trunc(Duration::hours(1)).unwrap_or(local);
    floored - offset
}

/// Whole days since the Unix epoch, used to bucket daily counts.
pub fn day_index(t: Timestamp) -> i64 {
    t.timestamp().div_euclid(86_400)
}

pub fn secs(n: u64) -> Duration {
    Duration::seconds(n as i64)
}
