//! Virtual timestamps.
//!
//! Time is kept as an integer count of microseconds so that event ordering and
//! interval arithmetic are exact. Durations in configuration and on the wire
//! are plain `f64` seconds and are rounded to the nearest microsecond when
//! turned into instants.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

const MICROS_PER_SEC: f64 = 1_000_000.0;

/// An instant on the virtual clock.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    /// Rounds to the nearest microsecond; negative and non-finite inputs clamp to zero.
    pub fn from_secs(secs: f64) -> Self {
        if !secs.is_finite() || secs <= 0.0 {
            return SimTime(0);
        }
        SimTime((secs * MICROS_PER_SEC).round() as u64)
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 / MICROS_PER_SEC
    }

    /// The instant `secs` seconds after `self`.
    pub fn after(self, secs: f64) -> Self {
        SimTime(self.0.saturating_add(SimTime::from_secs(secs).0))
    }

    /// Seconds elapsed since `earlier`, zero if `earlier` is in the future.
    pub fn secs_since(self, earlier: SimTime) -> f64 {
        self.0.saturating_sub(earlier.0) as f64 / MICROS_PER_SEC
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_secs())
    }
}

impl Serialize for SimTime {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_secs())
    }
}

impl<'de> Deserialize<'de> for SimTime {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let secs = f64::deserialize(d)?;
        if !secs.is_finite() || secs < 0.0 {
            return Err(serde::de::Error::custom("timestamp must be a non-negative number"));
        }
        Ok(SimTime::from_secs(secs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounds_to_microseconds() {
        assert_eq!(SimTime::from_secs(0.01).as_micros(), 10_000);
        assert_eq!(SimTime::from_secs(1.0000004).as_micros(), 1_000_000);
        assert_eq!(SimTime::from_secs(-3.0), SimTime::ZERO);
    }

    #[test]
    fn serde_uses_seconds() {
        let t = SimTime::from_secs(0.03);
        assert_eq!(serde_json::to_string(&t).unwrap(), "0.03");
        let back: SimTime = serde_json::from_str("0.03").unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn after_and_since() {
        let t = SimTime::from_secs(10.0).after(2.5);
        assert_eq!(t.as_secs(), 12.5);
        assert_eq!(t.secs_since(SimTime::from_secs(10.0)), 2.5);
        assert_eq!(SimTime::ZERO.secs_since(t), 0.0);
    }
}
