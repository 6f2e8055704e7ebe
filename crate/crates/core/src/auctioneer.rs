//! Per-host market authority.
//!
//! Accepts bids, has the bank settle them, boots a VM per bid, keeps the
//! host's CPU divided in proportion to bid rates, expires bids, and pushes
//! the host price to the directory.

use std::any::Any;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bank::BANK_ENDPOINT;
use crate::directory::{DEFAULT_HEARTBEAT_INTERVAL, DIRECTORY_ENDPOINT};
use crate::market::{compute_shares, host_price, Bid, BidId, Credit, HostCapacity, ShareVector};
use crate::simnet::{Context, Envelope, Service, VmSpec, VmState};
use crate::time::SimTime;

/// How long a submission waits for the bank before it is rejected.
pub const SETTLE_TIMEOUT: f64 = 5.0;

pub fn auctioneer_endpoint(host_id: &str) -> String {
    format!("auc/{host_id}")
}

pub fn provider_account(host_id: &str) -> String {
    format!("provider-{host_id}")
}

pub fn vm_id_for(host_id: &str, bid_id: &BidId) -> String {
    format!("{host_id}/{}", bid_id.0)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuctionError {
    #[error("bid `{0}` is already known on this host")]
    DuplicateBid(String),
    #[error("unknown or expired bid `{0}`")]
    UnknownBid(String),
    #[error("host `{host}` has {free} MiB unreserved, vm needs {wanted} MiB")]
    InsufficientMemory { host: String, free: u64, wanted: u64 },
    #[error("new end {end} is not after now ({now})")]
    EndInPast { end: SimTime, now: SimTime },
    #[error("malformed request: {0}")]
    Malformed(String),
}

impl AuctionError {
    pub fn code(&self) -> &'static str {
        match self {
            AuctionError::DuplicateBid(_) => "duplicate_bid",
            AuctionError::UnknownBid(_) => "unknown_bid",
            AuctionError::InsufficientMemory { .. } => "insufficient_memory",
            AuctionError::EndInPast { .. } => "end_in_past",
            AuctionError::Malformed(_) => "malformed",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ActiveBid {
    pub bid: Bid,
    pub vm_id: String,
    pub t_end: SimTime,
    /// Endpoint that submitted the bid.
    pub client: String,
}

/// One row of an `auc.status` reply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BidStatus {
    pub bid_id: BidId,
    pub bidder: String,
    pub amount: Credit,
    pub duration: f64,
    pub placed_at: SimTime,
    pub t_end: SimTime,
    pub rate: f64,
    pub share: f64,
    pub vm_id: String,
    pub vm_state: Option<VmState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuctionStatus {
    pub host_id: String,
    pub capacity: HostCapacity,
    pub price: f64,
    pub bids: Vec<BidStatus>,
}

impl AuctionStatus {
    pub fn bid(&self, bid_id: &BidId) -> Option<&BidStatus> {
        self.bids.iter().find(|b| &b.bid_id == bid_id)
    }
}

#[derive(Debug, Deserialize)]
struct SubmitRequest {
    bid: Bid,
    #[serde(default)]
    spec: VmSpec,
}

#[derive(Debug, Deserialize)]
struct AdjustRequest {
    bid_id: BidId,
    duration: f64,
}

/// A submission waiting on the bank.
struct Pending {
    request: Envelope,
    bid: Bid,
    spec: VmSpec,
}

pub struct AuctioneerService {
    host_id: String,
    directory: String,
    bank: String,
    heartbeat_interval: f64,
    active: BTreeMap<BidId, ActiveBid>,
    /// Keyed by the request id of the outstanding `bank.settle`.
    pending: BTreeMap<String, Pending>,
    /// Submissions granted but still booting, keyed by vm id.
    booting: BTreeMap<String, Envelope>,
    price: f64,
}

impl AuctioneerService {
    pub fn new(host_id: impl Into<String>) -> Self {
        AuctioneerService {
            host_id: host_id.into(),
            directory: DIRECTORY_ENDPOINT.into(),
            bank: BANK_ENDPOINT.into(),
            heartbeat_interval: DEFAULT_HEARTBEAT_INTERVAL,
            active: BTreeMap::new(),
            pending: BTreeMap::new(),
            booting: BTreeMap::new(),
            price: 0.0,
        }
    }

    pub fn with_heartbeat_interval(mut self, secs: f64) -> Self {
        self.heartbeat_interval = secs;
        self
    }

    pub fn with_endpoints(mut self, directory: &str, bank: &str) -> Self {
        self.directory = directory.to_string();
        self.bank = bank.to_string();
        self
    }

    pub fn host_id(&self) -> &str {
        &self.host_id
    }

    pub fn active(&self) -> impl Iterator<Item = &ActiveBid> {
        self.active.values()
    }

    pub fn price(&self) -> f64 {
        self.price
    }

    fn bids(&self) -> Vec<Bid> {
        self.active.values().map(|a| a.bid.clone()).collect()
    }

    pub fn shares(&self) -> ShareVector {
        compute_shares(&self.bids()).expect("active bids were validated on entry")
    }

    fn capacity(&self, ctx: &mut dyn Context) -> HostCapacity {
        ctx.hosts().get(&self.host_id).map(|h| h.capacity).expect("auctioneer runs on a known host")
    }

    fn memory_free(&self, ctx: &mut dyn Context) -> u64 {
        let host = ctx.hosts().get(&self.host_id).map(|h| h.memory_free()).unwrap_or(0);
        let held: u64 = self.pending.values().map(|p| p.spec.memory).sum();
        host.saturating_sub(held)
    }

    pub fn status(&self, ctx: &mut dyn Context) -> AuctionStatus {
        let capacity = self.capacity(ctx);
        let shares = self.shares();
        let bids = self
            .active
            .values()
            .map(|a| BidStatus {
                bid_id: a.bid.bid_id.clone(),
                bidder: a.bid.bidder.clone(),
                amount: a.bid.amount,
                duration: a.bid.duration,
                placed_at: a.bid.placed_at,
                t_end: a.t_end,
                rate: a.bid.rate().0,
                share: shares.get(&a.bid.bid_id).unwrap_or(0.0),
                vm_id: a.vm_id.clone(),
                vm_state: ctx.hosts().find_vm(&a.vm_id).map(|v| v.state),
            })
            .collect();
        AuctionStatus { host_id: self.host_id.clone(), capacity, price: self.price, bids }
    }

    /// Recomputes shares, applies them to the host, and publishes the price.
    fn reallocate(&mut self, ctx: &mut dyn Context) {
        let capacity = self.capacity(ctx);
        let shares = self.shares();
        let rates: BTreeMap<String, f64> = self
            .active
            .values()
            .map(|a| (a.vm_id.clone(), shares.get(&a.bid.bid_id).unwrap_or(0.0) * capacity.cpu_capacity))
            .collect();
        if let Err(e) = ctx.hosts().set_rates(&self.host_id, &rates) {
            log::error!("auctioneer {}: {e}", self.host_id);
        }
        self.price = host_price(&self.bids(), &capacity).expect("capacity validated at host creation");
        let share_map: BTreeMap<&str, f64> = shares.iter().map(|(id, s)| (id.0.as_str(), s)).collect();
        ctx.record("auc.shares", json!({"host": self.host_id, "shares": share_map, "price": self.price}));
        self.heartbeat(ctx);
    }

    fn heartbeat(&self, ctx: &mut dyn Context) {
        let memory_free = self.memory_free(ctx);
        ctx.send(&self.directory, "sls.heartbeat", json!({"host_id": self.host_id, "price": self.price, "memory_free": memory_free}));
    }

    fn register(&self, ctx: &mut dyn Context) {
        let capacity = self.capacity(ctx);
        let memory_free = self.memory_free(ctx);
        ctx.send(
            &self.directory,
            "sls.register",
            json!({
                "host_id": self.host_id,
                "address": ctx.me().to_string(),
                "capacity": capacity,
                "price": self.price,
                "memory_free": memory_free,
            }),
        );
    }

    fn schedule_heartbeat(&self, ctx: &mut dyn Context) {
        let at = ctx.now().after(self.heartbeat_interval);
        ctx.set_timer(at, json!({"kind": "heartbeat"}));
    }

    fn schedule_expiry(&self, ctx: &mut dyn Context, at: SimTime) {
        ctx.set_timer(at, json!({"kind": "expire"}));
    }

    /// Removes every bid whose end has come and shuts its VM down.
    pub fn expire_bids(&mut self, ctx: &mut dyn Context) -> Vec<String> {
        let now = ctx.now();
        let due: Vec<BidId> = self.active.values().filter(|a| a.t_end <= now).map(|a| a.bid.bid_id.clone()).collect();
        let mut terminated = Vec::new();
        for id in due {
            let a = self.active.remove(&id).expect("listed above");
            let me = ctx.me().to_string();
            ctx.hosts().remove_vm(&a.vm_id, &me);
            if let Some(req) = self.booting.remove(&a.vm_id) {
                ctx.reply_err(&req, "expired", "bid expired before the vm finished booting");
            }
            ctx.record("auc.expire", json!({"host": self.host_id, "bid_id": id.0, "vm_id": a.vm_id}));
            terminated.push(a.vm_id);
        }
        if !terminated.is_empty() {
            self.reallocate(ctx);
        }
        terminated
    }

    fn submit(&mut self, ctx: &mut dyn Context, msg: &Envelope) -> Result<(), AuctionError> {
        let req: SubmitRequest = msg.body_as().map_err(|e| AuctionError::Malformed(e.to_string()))?;
        let mut bid = req.bid;
        bid.validate().map_err(|e| AuctionError::Malformed(e.to_string()))?;
        req.spec.validate().map_err(|e| AuctionError::Malformed(e.to_string()))?;
        let id = bid.bid_id.clone();
        if self.active.contains_key(&id) || self.pending.values().any(|p| p.bid.bid_id == id) {
            return Err(AuctionError::DuplicateBid(id.0));
        }
        let vm_id = vm_id_for(&self.host_id, &id);
        if ctx.hosts().vm_or_retired(&vm_id).is_some() {
            return Err(AuctionError::DuplicateBid(id.0));
        }
        let free = self.memory_free(ctx);
        if req.spec.memory > free {
            return Err(AuctionError::InsufficientMemory { host: self.host_id.clone(), free, wanted: req.spec.memory });
        }
        bid.placed_at = ctx.now();
        let settle = ctx.send(&self.bank, "bank.settle", json!({"bid": bid, "provider": provider_account(&self.host_id)}));
        ctx.set_timer(ctx.now().after(SETTLE_TIMEOUT), json!({"kind": "settle_timeout", "request": settle}));
        self.pending.insert(settle, Pending { request: msg.clone(), bid, spec: req.spec });
        Ok(())
    }

    fn granted(&mut self, ctx: &mut dyn Context, p: Pending) {
        let vm_id = vm_id_for(&self.host_id, &p.bid.bid_id);
        let me = ctx.me().to_string();
        if let Err(e) = ctx.hosts().create_vm(&self.host_id, &vm_id, p.spec, &me) {
            ctx.reply_err(&p.request, "host", &e.to_string());
            return;
        }
        let delay = ctx.hosts().get(&self.host_id).map(|h| h.boot_delay).unwrap_or(0.0);
        let ready = ctx.boot_vm(&vm_id, delay).expect("vm was just provisioned");
        let t_end = p.bid.ends_at();
        ctx.record("auc.grant", json!({"host": self.host_id, "bid_id": p.bid.bid_id.0, "vm_id": vm_id, "t_end": t_end}));
        self.active.insert(
            p.bid.bid_id.clone(),
            ActiveBid { bid: p.bid, vm_id: vm_id.clone(), t_end, client: p.request.sender.clone() },
        );
        self.booting.insert(vm_id.clone(), p.request);
        ctx.set_timer(ready, json!({"kind": "booted", "vm_id": vm_id}));
        self.schedule_expiry(ctx, t_end);
        self.reallocate(ctx);
    }

    fn settle_failed(&mut self, ctx: &mut dyn Context, request_id: &str, code: &str, message: &str) {
        if let Some(p) = self.pending.remove(request_id) {
            ctx.record("auc.reject", json!({"host": self.host_id, "bid_id": p.bid.bid_id.0, "code": code}));
            ctx.reply_err(&p.request, code, message);
        }
    }

    fn adjust(&mut self, ctx: &mut dyn Context, msg: &Envelope) -> Result<Value, AuctionError> {
        let req: AdjustRequest = msg.body_as().map_err(|e| AuctionError::Malformed(e.to_string()))?;
        let now = ctx.now();
        let a = self
            .active
            .get_mut(&req.bid_id)
            .filter(|a| a.t_end > now)
            .ok_or_else(|| AuctionError::UnknownBid(req.bid_id.0.clone()))?;
        if !(req.duration.is_finite() && req.duration > 0.0) {
            return Err(AuctionError::Malformed("duration must be positive".into()));
        }
        let end = a.bid.placed_at.after(req.duration);
        if end <= now {
            return Err(AuctionError::EndInPast { end, now });
        }
        a.bid.duration = req.duration;
        a.t_end = end;
        ctx.record("auc.adjust", json!({"host": self.host_id, "bid_id": req.bid_id.0, "duration": req.duration, "t_end": end}));
        self.schedule_expiry(ctx, end);
        self.reallocate(ctx);
        let shares: BTreeMap<String, f64> = self.shares().iter().map(|(id, s)| (id.0.clone(), s)).collect();
        Ok(json!({"bid_id": req.bid_id, "t_end": end, "shares": shares, "price": self.price}))
    }

    fn vm_gone(&mut self, ctx: &mut dyn Context, vm_id: &str) {
        let Some(id) = self.active.values().find(|a| a.vm_id == vm_id).map(|a| a.bid.bid_id.clone()) else {
            return;
        };
        self.active.remove(&id);
        let me = ctx.me().to_string();
        ctx.hosts().remove_vm(vm_id, &me);
        if let Some(req) = self.booting.remove(vm_id) {
            ctx.reply_err(&req, "vm_died", "vm died while booting");
        }
        ctx.record("auc.vm_lost", json!({"host": self.host_id, "bid_id": id.0, "vm_id": vm_id}));
        self.reallocate(ctx);
    }

    fn on_reply(&mut self, ctx: &mut dyn Context, msg: &Envelope) {
        match msg.msg_type.as_str() {
            "bank.settle.ok" => {
                if let Some(p) = self.pending.remove(&msg.request_id) {
                    self.granted(ctx, p);
                }
            }
            "bank.settle.err" => {
                let code = msg.body.get("code").and_then(Value::as_str).unwrap_or("bank").to_string();
                let message = msg.body.get("message").and_then(Value::as_str).unwrap_or("settlement failed").to_string();
                self.settle_failed(ctx, &msg.request_id, &code, &message);
            }
            "net.undeliverable" => {
                self.settle_failed(ctx, &msg.request_id, "bank_unavailable", "bank did not accept the settlement");
            }
            "sls.heartbeat.err" => self.register(ctx),
            _ => {}
        }
    }
}

impl Service for AuctioneerService {
    fn on_start(&mut self, ctx: &mut dyn Context) {
        let account = provider_account(&self.host_id);
        ctx.send(&self.bank, "bank.open", json!({"account": account, "grant": Credit::ZERO}));
        self.register(ctx);
        self.schedule_heartbeat(ctx);
    }

    fn on_restart(&mut self, ctx: &mut dyn Context) {
        self.register(ctx);
        self.schedule_heartbeat(ctx);
        let ends: Vec<SimTime> = self.active.values().map(|a| a.t_end).collect();
        for end in ends {
            self.schedule_expiry(ctx, end);
        }
    }

    fn on_message(&mut self, ctx: &mut dyn Context, msg: &Envelope) {
        let result = match msg.msg_type.as_str() {
            "auc.submit" => self.submit(ctx, msg).map(|()| None),
            "auc.adjust" => self.adjust(ctx, msg).map(Some),
            "auc.status" => Ok(Some(serde_json::to_value(self.status(ctx)).expect("status serializes"))),
            "host.vm_gone" => {
                if let Some(vm) = msg.body.get("vm_id").and_then(Value::as_str) {
                    self.vm_gone(ctx, vm);
                }
                return;
            }
            _ => {
                self.on_reply(ctx, msg);
                return;
            }
        };
        match result {
            Ok(Some(body)) => ctx.reply_ok(msg, body),
            Ok(None) => {}
            Err(e) => ctx.reply_err(msg, e.code(), &e.to_string()),
        }
    }

    fn on_timer(&mut self, ctx: &mut dyn Context, tag: &Value) {
        match tag.get("kind").and_then(Value::as_str) {
            Some("heartbeat") => {
                self.heartbeat(ctx);
                self.schedule_heartbeat(ctx);
            }
            Some("expire") => {
                self.expire_bids(ctx);
            }
            Some("booted") => {
                let Some(vm_id) = tag.get("vm_id").and_then(Value::as_str) else { return };
                let running = ctx.hosts().find_vm(vm_id).is_some_and(|v| v.state == VmState::Running);
                if !running {
                    return;
                }
                if let Some(req) = self.booting.remove(vm_id) {
                    let a = self.active.values().find(|a| a.vm_id == vm_id).expect("booting vms belong to active bids");
                    let body = json!({"bid_id": a.bid.bid_id, "vm_id": vm_id, "host": self.host_id, "t_end": a.t_end, "placed_at": a.bid.placed_at});
                    ctx.reply_ok(&req, body);
                }
            }
            Some("settle_timeout") => {
                if let Some(r) = tag.get("request").and_then(Value::as_str) {
                    self.settle_failed(ctx, r, "bank_timeout", "no answer from the bank");
                }
            }
            _ => {}
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
