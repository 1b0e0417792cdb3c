//! Virtual monotonic clock and correlation-ID issuance.
//!
//! Every timestamp in a run lives in one clock domain with 1 ns resolution.
//! The clock only moves when the scheduler advances it, so timing is part of
//! the configuration rather than host noise.

use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Nanoseconds in the virtual monotonic clock domain.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TimestampNs(pub u64);

impl TimestampNs {
    pub const ZERO: TimestampNs = TimestampNs(0);

    pub fn from_millis_f64(ms: f64) -> Self {
        TimestampNs(ms_to_ns(ms))
    }

    pub fn from_secs_f64(s: f64) -> Self {
        TimestampNs(secs_to_ns(s))
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-9
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 * 1e-6
    }

    /// `self - earlier`, or `None` when `earlier` is later than `self`.
    pub fn checked_since(self, earlier: TimestampNs) -> Option<u64> {
        self.0.checked_sub(earlier.0)
    }
}

impl Add<u64> for TimestampNs {
    type Output = TimestampNs;
    fn add(self, rhs: u64) -> TimestampNs {
        TimestampNs(self.0 + rhs)
    }
}

impl Sub for TimestampNs {
    type Output = i128;
    fn sub(self, rhs: TimestampNs) -> i128 {
        self.0 as i128 - rhs.0 as i128
    }
}

impl fmt::Display for TimestampNs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Round a non-negative millisecond quantity to integer nanoseconds.
pub fn ms_to_ns(ms: f64) -> u64 {
    (ms * 1e6).round().max(0.0) as u64
}

pub fn secs_to_ns(s: f64) -> u64 {
    (s * 1e9).round().max(0.0) as u64
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClockError {
    #[error("clock cannot move backwards (advance by {0} ns)")]
    NegativeAdvance(i64),
    #[error("cannot advance to {target} which is before now ({now})")]
    InPast { now: TimestampNs, target: TimestampNs },
}

/// The run's single source of time. Starts at 0 ns.
#[derive(Debug, Clone, Default)]
pub struct Clock {
    now: TimestampNs,
}

impl Clock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> TimestampNs {
        self.now
    }

    pub fn advance(&mut self, dt_ns: i64) -> Result<TimestampNs, ClockError> {
        if dt_ns < 0 {
            return Err(ClockError::NegativeAdvance(dt_ns));
        }
        self.now = self.now + dt_ns as u64;
        Ok(self.now)
    }

    /// Jump forward to an absolute time; used by the event scheduler.
    pub fn advance_to(&mut self, target: TimestampNs) -> Result<TimestampNs, ClockError> {
        if target < self.now {
            return Err(ClockError::InPast { now: self.now, target });
        }
        self.now = target;
        Ok(self.now)
    }
}

/// Correlation ID tagging one GTS sample through every stage of its cycle.
/// `0` is reserved for "no correlation".
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorrelationId(pub u64);

impl CorrelationId {
    pub const NONE: CorrelationId = CorrelationId(0);
}

impl fmt::Display for CorrelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cid{}", self.0)
    }
}

/// Hands out strictly increasing correlation IDs starting at 1.
#[derive(Debug, Clone, Default)]
pub struct CorrelationIssuer {
    last: u64,
}

impl CorrelationIssuer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn issue(&mut self) -> CorrelationId {
        self.last += 1;
        CorrelationId(self.last)
    }

    pub fn issued(&self) -> u64 {
        self.last
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn fresh_clock_reads_zero() {
        assert_eq!(Clock::new().now(), TimestampNs(0));
    }

    #[test]
    fn advance_is_additive() {
        let mut c = Clock::new();
        assert_eq!(c.advance(5_000_000).unwrap(), TimestampNs(5_000_000));
        assert_eq!(c.now(), TimestampNs(5_000_000));
        c.advance(3_000_000).unwrap();
        assert_eq!(c.now(), TimestampNs(8_000_000));
        c.advance(0).unwrap();
        assert_eq!(c.now(), TimestampNs(8_000_000));
    }

    #[test]
    fn negative_advance_rejected() {
        let mut c = Clock::new();
        assert_eq!(c.advance(-1), Err(ClockError::NegativeAdvance(-1)));
        assert_eq!(c.now(), TimestampNs(0));
        c.advance(10).unwrap();
        assert!(c.advance_to(TimestampNs(9)).is_err());
    }

    #[test]
    fn ids_start_at_one_and_are_unique() {
        let mut ids = CorrelationIssuer::new();
        assert_eq!(ids.issue(), CorrelationId(1));
        assert_eq!(ids.issue(), CorrelationId(2));
        let mut seen = HashSet::new();
        let mut prev = CorrelationId(2);
        for _ in 0..10_000 {
            let id = ids.issue();
            assert!(id > prev);
            prev = id;
            seen.insert(id);
        }
        assert_eq!(seen.len(), 10_000);
    }

    #[test]
    fn unit_conversions_round() {
        assert_eq!(ms_to_ns(36.58), 36_580_000);
        assert_eq!(ms_to_ns(0.26), 260_000);
        assert_eq!(secs_to_ns(0.0072), 7_200_000);
    }
}
