//! Allocation mathematics for the proportional-share CPU market.
//!
//! A bid commits an amount of credits over a planned duration. Its rate
//! (credits per second) is what competes: each bid on a host receives the
//! fraction `rate / Σ rates` of the host's CPU capacity. Credits are exact
//! fixed-point values; rates and shares are `f64`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::time::SimTime;

/// Minimum rate a bidder needs when it has no competition, in credits/second.
pub const FLOOR_RATE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error("malformed bid {bid_id}: {reason}")]
    MalformedBid { bid_id: String, reason: String },
    #[error("invalid credit amount `{0}`")]
    InvalidCredit(String),
    #[error("credit arithmetic overflow")]
    Overflow,
    #[error("target share {target} is unreachable against competing rate {competing}")]
    Unsatisfiable { target: f64, competing: f64 },
    #[error("invalid capacity: {0}")]
    InvalidCapacity(String),
}

/// A non-negative amount of credits with two decimal places, stored as cents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Credit(u64);

impl Credit {
    pub const ZERO: Credit = Credit(0);

    pub const fn from_cents(cents: u64) -> Self {
        Credit(cents)
    }

    pub fn from_units(units: u64) -> Self {
        Credit(units * 100)
    }

    pub fn cents(self) -> u64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    /// Smallest credit amount covering `value`, ignoring float noise below a
    /// millionth of a cent.
    pub fn ceil_from_f64(value: f64) -> Result<Self, MarketError> {
        if !value.is_finite() || value < 0.0 {
            return Err(MarketError::InvalidCredit(value.to_string()));
        }
        let cents = (value * 100.0 - 1e-6).ceil().max(0.0);
        if cents >= u64::MAX as f64 {
            return Err(MarketError::Overflow);
        }
        Ok(Credit(cents as u64))
    }

    pub fn checked_add(self, other: Credit) -> Option<Credit> {
        self.0.checked_add(other.0).map(Credit)
    }

    pub fn checked_sub(self, other: Credit) -> Option<Credit> {
        self.0.checked_sub(other.0).map(Credit)
    }
}

impl fmt::Display for Credit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

impl FromStr for Credit {
    type Err = MarketError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MarketError::InvalidCredit(s.to_string());
        let (whole, frac) = match s.split_once('.') {
            Some((w, f)) => (w, f),
            None => (s, ""),
        };
        if whole.is_empty() || !whole.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        if frac.len() > 2 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        if s.contains('.') && frac.is_empty() {
            return Err(bad());
        }
        let whole: u64 = whole.parse().map_err(|_| bad())?;
        let frac_cents = match frac.len() {
            0 => 0,
            1 => frac.parse::<u64>().map_err(|_| bad())? * 10,
            _ => frac.parse::<u64>().map_err(|_| bad())?,
        };
        whole
            .checked_mul(100)
            .and_then(|c| c.checked_add(frac_cents))
            .map(Credit)
            .ok_or(MarketError::Overflow)
    }
}

impl Serialize for Credit {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Credit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Identifier of a bid, unique per auctioneer.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BidId(pub String);

impl fmt::Display for BidId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for BidId {
    fn from(s: &str) -> Self {
        BidId(s.to_string())
    }
}

/// A credit commitment over a planned number of virtual seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bid {
    pub bid_id: BidId,
    pub bidder: String,
    pub amount: Credit,
    /// Planned seconds of use.
    pub duration: f64,
    pub placed_at: SimTime,
}

impl Bid {
    pub fn new(
        bid_id: impl Into<String>,
        bidder: impl Into<String>,
        amount: Credit,
        duration: f64,
        placed_at: SimTime,
    ) -> Result<Self, MarketError> {
        let bid = Bid {
            bid_id: BidId(bid_id.into()),
            bidder: bidder.into(),
            amount,
            duration,
            placed_at,
        };
        bid.validate()?;
        Ok(bid)
    }

    pub fn validate(&self) -> Result<(), MarketError> {
        let malformed = |reason: &str| MarketError::MalformedBid {
            bid_id: self.bid_id.0.clone(),
            reason: reason.to_string(),
        };
        if self.amount.is_zero() {
            return Err(malformed("amount must be positive"));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(malformed("duration must be a positive number of seconds"));
        }
        Ok(())
    }

    pub fn rate(&self) -> BidRate {
        BidRate(self.amount.as_f64() / self.duration)
    }

    /// Instant at which the bid stops covering its VM.
    pub fn ends_at(&self) -> SimTime {
        self.placed_at.after(self.duration)
    }
}

/// Credits per virtual second.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BidRate(pub f64);

impl BidRate {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Per-bid CPU fractions on one host.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShareVector(pub BTreeMap<BidId, f64>);

impl ShareVector {
    pub fn get(&self, bid: &BidId) -> Option<f64> {
        self.0.get(bid).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BidId, f64)> {
        self.0.iter().map(|(k, v)| (k, *v))
    }
}

/// CPU capacity in abstract units (1.0 is one physical core) and memory in MiB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HostCapacity {
    pub cpu_capacity: f64,
    pub memory_total: u64,
}

impl HostCapacity {
    pub fn new(cpu_capacity: f64, memory_total: u64) -> Result<Self, MarketError> {
        let cap = HostCapacity { cpu_capacity, memory_total };
        cap.validate()?;
        Ok(cap)
    }

    pub fn validate(&self) -> Result<(), MarketError> {
        if !(self.cpu_capacity.is_finite() && self.cpu_capacity > 0.0) {
            return Err(MarketError::InvalidCapacity(format!(
                "cpu capacity must be positive, got {}",
                self.cpu_capacity
            )));
        }
        if self.memory_total == 0 {
            return Err(MarketError::InvalidCapacity("memory must be positive".into()));
        }
        Ok(())
    }
}

/// Proportional shares: each bid gets `rate / Σ rates`.
pub fn compute_shares(bids: &[Bid]) -> Result<ShareVector, MarketError> {
    for bid in bids {
        bid.validate()?;
    }
    let total: f64 = bids.iter().map(|b| b.rate().0).sum();
    let shares = bids
        .iter()
        .map(|b| (b.bid_id.clone(), b.rate().0 / total))
        .collect();
    Ok(ShareVector(shares))
}

/// Sum of active rates per unit of CPU capacity. An idle host costs nothing.
pub fn host_price(bids: &[Bid], capacity: &HostCapacity) -> Result<f64, MarketError> {
    capacity.validate()?;
    for bid in bids {
        bid.validate()?;
    }
    let total: f64 = bids.iter().map(|b| b.rate().0).sum();
    Ok(total / capacity.cpu_capacity)
}

/// Smallest rate that obtains `target_share` against `competing_rate`.
///
/// Against no competition the answer is [`FLOOR_RATE`] whatever the target.
pub fn required_rate_for_share(target_share: f64, competing_rate: f64) -> Result<BidRate, MarketError> {
    let unsatisfiable = || MarketError::Unsatisfiable {
        target: target_share,
        competing: competing_rate,
    };
    if !competing_rate.is_finite() || competing_rate < 0.0 || target_share.is_nan() {
        return Err(unsatisfiable());
    }
    if competing_rate == 0.0 {
        return Ok(BidRate(FLOOR_RATE));
    }
    if !(target_share > 0.0 && target_share < 1.0) {
        return Err(unsatisfiable());
    }
    Ok(BidRate(target_share * competing_rate / (1.0 - target_share)))
}
