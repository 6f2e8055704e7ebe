//! Client-side bidding: host selection and the best-response loop.
//!
//! A bidder commits its whole budget as the bid amount and steers its share
//! afterwards by changing only the bid's duration, which the auctioneer
//! applies without involving the bank.

use std::any::Any;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::auctioneer::AuctionStatus;
use crate::directory::{HostRecord, DIRECTORY_ENDPOINT};
use crate::market::{required_rate_for_share, Bid, BidId, Credit};
use crate::simnet::{Context, Envelope, Service, VmSpec};
use crate::time::SimTime;

/// Below `target - HYSTERESIS` the bidder raises its rate.
pub const HYSTERESIS: f64 = 0.01;
/// Above `target + EXTEND_MARGIN` the bidder lowers its rate.
pub const EXTEND_MARGIN: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BidderError {
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("no host fits the vm and the budget")]
    NoAffordableHost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BidPolicy {
    pub target_share: f64,
    pub budget: Credit,
    pub planned_duration: f64,
    pub check_interval: f64,
}

impl BidPolicy {
    pub fn validate(&self) -> Result<(), BidderError> {
        if !(self.target_share > 0.0 && self.target_share < 1.0) {
            return Err(BidderError::InvalidPolicy(format!("target share {} outside (0,1)", self.target_share)));
        }
        if self.budget.is_zero() {
            return Err(BidderError::InvalidPolicy("budget must be positive".into()));
        }
        if !(self.planned_duration.is_finite() && self.planned_duration > 0.0) {
            return Err(BidderError::InvalidPolicy("planned duration must be positive".into()));
        }
        if !(self.check_interval.is_finite() && self.check_interval > 0.0) {
            return Err(BidderError::InvalidPolicy("check interval must be positive".into()));
        }
        Ok(())
    }
}

/// The host chosen by [`select_host`] and what reaching the target there costs.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub host: HostRecord,
    pub required_rate: f64,
    pub cost: Credit,
}

/// First host in `ranked` whose free memory fits `spec` and where the target
/// share over the planned duration costs no more than the budget.
pub fn select_host(policy: &BidPolicy, spec: &VmSpec, ranked: &[HostRecord]) -> Result<Selection, BidderError> {
    policy.validate()?;
    for host in ranked {
        if host.memory_free.is_some_and(|free| free < spec.memory) {
            continue;
        }
        let competing = host.current_price * host.capacity.cpu_capacity;
        let Ok(rate) = required_rate_for_share(policy.target_share, competing) else { continue };
        let Ok(cost) = Credit::ceil_from_f64(rate.0 * policy.planned_duration) else { continue };
        if cost <= policy.budget {
            return Ok(Selection { host: host.clone(), required_rate: rate.0, cost });
        }
    }
    Err(BidderError::NoAffordableHost)
}

/// The bid placed on a freshly selected host: the whole budget over the planned duration.
pub fn initial_bid(policy: &BidPolicy, bid_id: &str, bidder: &str, now: SimTime) -> Bid {
    Bid {
        bid_id: BidId(bid_id.to_string()),
        bidder: bidder.to_string(),
        amount: policy.budget,
        duration: policy.planned_duration,
        placed_at: now,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    None,
    Adjust { new_duration: f64 },
    /// The target would need a higher rate than the committed amount can sustain.
    BudgetExceeded { required_rate: f64, max_rate: f64 },
}

/// One best-response decision against an observed auction.
pub fn best_response_step(policy: &BidPolicy, status: &AuctionStatus, bid_id: &BidId, now: SimTime) -> Action {
    let Some(own) = status.bid(bid_id) else { return Action::None };
    let competing: f64 = status.bids.iter().filter(|b| &b.bid_id != bid_id).map(|b| b.rate).sum();
    let share = own.share;
    let target = policy.target_share;
    let raise = share < target - HYSTERESIS;
    let lower = share > target + EXTEND_MARGIN;
    if !raise && !lower {
        return Action::None;
    }
    let Ok(required) = required_rate_for_share(target, competing) else {
        return Action::None;
    };
    let amount = own.amount.as_f64();
    if raise {
        // The bid must still cover at least the next check.
        let earliest_end = now.secs_since(own.placed_at) + policy.check_interval;
        let max_rate = amount / earliest_end;
        if required.0 > max_rate {
            return Action::BudgetExceeded { required_rate: required.0, max_rate };
        }
    }
    let new_duration = amount / required.0;
    if (new_duration - own.duration).abs() < 1e-9 {
        return Action::None;
    }
    Action::Adjust { new_duration }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BidMode {
    /// Place one bid and stop.
    Once,
    /// Keep adjusting toward the target share.
    Auto,
}

#[derive(Clone, Debug, PartialEq)]
enum Phase {
    Selecting,
    Submitting,
    Holding { host: String, address: String, bid_id: BidId },
    Done,
}

/// An autonomous client: picks a host, bids, and in auto mode runs the
/// best-response loop every `check_interval`.
pub struct BidderAgent {
    account: String,
    policy: BidPolicy,
    spec: VmSpec,
    mode: BidMode,
    directory: String,
    bid_id: String,
    phase: Phase,
    exceeded: bool,
    vm_id: Option<String>,
}

impl BidderAgent {
    pub fn new(account: impl Into<String>, policy: BidPolicy, spec: VmSpec, mode: BidMode) -> Self {
        let account = account.into();
        BidderAgent {
            bid_id: format!("{account}-1"),
            account,
            policy,
            spec,
            mode,
            directory: DIRECTORY_ENDPOINT.into(),
            phase: Phase::Selecting,
            exceeded: false,
            vm_id: None,
        }
    }

    pub fn with_bid_id(mut self, bid_id: impl Into<String>) -> Self {
        self.bid_id = bid_id.into();
        self
    }

    pub fn vm_id(&self) -> Option<&str> {
        self.vm_id.as_deref()
    }

    pub fn host(&self) -> Option<&str> {
        match &self.phase {
            Phase::Holding { host, .. } => Some(host),
            _ => None,
        }
    }

    fn later(&self, ctx: &mut dyn Context, kind: &str) {
        let at = ctx.now().after(self.policy.check_interval);
        ctx.set_timer(at, json!(kind));
    }

    fn note(&self, ctx: &mut dyn Context, kind: &str, mut body: Value) {
        body["bidder"] = json!(self.account);
        ctx.record(kind, body);
    }

    fn on_hosts(&mut self, ctx: &mut dyn Context, msg: &Envelope) {
        let hosts: Vec<HostRecord> = msg.body.get("hosts").cloned().and_then(|v| serde_json::from_value(v).ok()).unwrap_or_default();
        match select_host(&self.policy, &self.spec, &hosts) {
            Ok(sel) => {
                let bid = initial_bid(&self.policy, &self.bid_id, &self.account, ctx.now());
                ctx.send(&sel.host.address, "auc.submit", json!({"bid": bid, "spec": self.spec}));
                self.note(ctx, "bidder.select", json!({"host": sel.host.host_id, "required_rate": sel.required_rate}));
                self.phase = Phase::Submitting;
            }
            Err(e) => {
                self.note(ctx, "bidder.no_host", json!({"reason": e.to_string()}));
                if self.mode == BidMode::Auto {
                    self.later(ctx, "retry");
                } else {
                    self.phase = Phase::Done;
                }
            }
        }
    }

    fn on_status(&mut self, ctx: &mut dyn Context, msg: &Envelope) {
        let Phase::Holding { address, bid_id, .. } = self.phase.clone() else { return };
        let Ok(status) = msg.body_as::<AuctionStatus>() else { return };
        if status.bid(&bid_id).is_none() {
            self.note(ctx, "bidder.lost", json!({"bid_id": bid_id}));
            self.phase = Phase::Done;
            return;
        }
        match best_response_step(&self.policy, &status, &bid_id, ctx.now()) {
            Action::None => self.exceeded = false,
            Action::Adjust { new_duration } => {
                self.exceeded = false;
                ctx.send(&address, "auc.adjust", json!({"bid_id": bid_id, "duration": new_duration}));
            }
            Action::BudgetExceeded { required_rate, max_rate } => {
                if !self.exceeded {
                    self.note(ctx, "bidder.budget_exceeded", json!({"required_rate": required_rate, "max_rate": max_rate}));
                }
                self.exceeded = true;
            }
        }
        self.later(ctx, "check");
    }
}

impl Service for BidderAgent {
    fn on_start(&mut self, ctx: &mut dyn Context) {
        ctx.send(&self.directory, "sls.query", json!({"limit": 100}));
    }

    fn on_message(&mut self, ctx: &mut dyn Context, msg: &Envelope) {
        match msg.msg_type.as_str() {
            "sls.query.ok" if self.phase == Phase::Selecting => self.on_hosts(ctx, msg),
            "auc.submit.ok" if self.phase == Phase::Submitting => {
                let host = msg.body.get("host").and_then(Value::as_str).unwrap_or_default().to_string();
                self.vm_id = msg.body.get("vm_id").and_then(Value::as_str).map(str::to_string);
                self.phase = Phase::Holding { host, address: msg.sender.clone(), bid_id: BidId(self.bid_id.clone()) };
                if self.mode == BidMode::Auto {
                    self.later(ctx, "check");
                }
            }
            "auc.submit.err" => {
                self.note(ctx, "bidder.rejected", json!({"code": msg.body.get("code")}));
                self.phase = Phase::Done;
            }
            "auc.status.ok" => self.on_status(ctx, msg),
            "net.undeliverable" if self.phase == Phase::Selecting && self.mode == BidMode::Auto => self.later(ctx, "retry"),
            _ => {}
        }
    }

    fn on_timer(&mut self, ctx: &mut dyn Context, tag: &Value) {
        match (tag.as_str(), &self.phase) {
            (Some("retry"), Phase::Selecting) => {
                ctx.send(&self.directory, "sls.query", json!({"limit": 100}));
            }
            (Some("check"), Phase::Holding { address, .. }) => {
                let address = address.clone();
                ctx.send(&address, "auc.status", json!({}));
            }
            _ => {}
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
