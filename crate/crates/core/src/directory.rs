//! Service location: a soft-state registry of provider hosts, ranked by price.

use std::any::Any;
use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::market::HostCapacity;
use crate::simnet::{Context, Envelope, Service};
use crate::time::SimTime;

pub const DIRECTORY_ENDPOINT: &str = "sls";
pub const DEFAULT_HEARTBEAT_INTERVAL: f64 = 10.0;
pub const DEFAULT_LIVENESS_WINDOW: f64 = 3.0 * DEFAULT_HEARTBEAT_INTERVAL;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DirectoryError {
    #[error("host `{host_id}` has malformed capacity: {reason}")]
    MalformedCapacity { host_id: String, reason: String },
    #[error("host `{0}` is not registered")]
    UnknownHost(String),
    #[error("price must be a non-negative number, got {0}")]
    InvalidPrice(f64),
    #[error("malformed request: {0}")]
    Malformed(String),
}

impl DirectoryError {
    pub fn code(&self) -> &'static str {
        match self {
            DirectoryError::MalformedCapacity { .. } => "invalid_capacity",
            DirectoryError::UnknownHost(_) => "unknown_host",
            DirectoryError::InvalidPrice(_) => "invalid_price",
            DirectoryError::Malformed(_) => "malformed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HostRecord {
    pub host_id: String,
    /// Endpoint of the host's auctioneer.
    pub address: String,
    pub capacity: HostCapacity,
    pub current_price: f64,
    pub last_heartbeat: SimTime,
    /// Unreserved memory as last reported by the host, MiB.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_free: Option<u64>,
}

/// Ascending price, then host id.
pub fn rank_order(a: &HostRecord, b: &HostRecord) -> Ordering {
    a.current_price.total_cmp(&b.current_price).then_with(|| a.host_id.cmp(&b.host_id))
}

fn check_price(price: f64) -> Result<(), DirectoryError> {
    if price.is_finite() && price >= 0.0 {
        Ok(())
    } else {
        Err(DirectoryError::InvalidPrice(price))
    }
}

#[derive(Clone, Debug)]
pub struct Directory {
    records: BTreeMap<String, HostRecord>,
    liveness_window: f64,
}

impl Default for Directory {
    fn default() -> Self {
        Directory::new(DEFAULT_LIVENESS_WINDOW)
    }
}

impl Directory {
    pub fn new(liveness_window: f64) -> Self {
        Directory { records: BTreeMap::new(), liveness_window }
    }

    pub fn liveness_window(&self) -> f64 {
        self.liveness_window
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, host_id: &str) -> Option<&HostRecord> {
        self.records.get(host_id)
    }

    /// Inserts or refreshes a record; `last_heartbeat` is set to `now`.
    pub fn register(&mut self, mut record: HostRecord, now: SimTime) -> Result<(), DirectoryError> {
        record.capacity.validate().map_err(|e| DirectoryError::MalformedCapacity {
            host_id: record.host_id.clone(),
            reason: e.to_string(),
        })?;
        if record.host_id.is_empty() {
            return Err(DirectoryError::Malformed("empty host id".into()));
        }
        check_price(record.current_price)?;
        record.last_heartbeat = now;
        self.records.insert(record.host_id.clone(), record);
        Ok(())
    }

    pub fn heartbeat(&mut self, host_id: &str, price: f64, memory_free: Option<u64>, now: SimTime) -> Result<(), DirectoryError> {
        check_price(price)?;
        let record = self.records.get_mut(host_id).ok_or_else(|| DirectoryError::UnknownHost(host_id.to_string()))?;
        record.current_price = price;
        record.last_heartbeat = now;
        if memory_free.is_some() {
            record.memory_free = memory_free;
        }
        Ok(())
    }

    fn is_live(&self, record: &HostRecord, now: SimTime) -> bool {
        now.secs_since(record.last_heartbeat) <= self.liveness_window + 1e-9
    }

    /// Drops every record whose last heartbeat is older than the liveness window.
    pub fn evict(&mut self, now: SimTime) -> Vec<String> {
        let stale: Vec<String> = self.records.values().filter(|r| !self.is_live(r, now)).map(|r| r.host_id.clone()).collect();
        for id in &stale {
            self.records.remove(id);
        }
        stale
    }

    /// Up to `limit` live records, cheapest first.
    pub fn query_ranked(&self, limit: usize, now: SimTime) -> Vec<HostRecord> {
        let mut live: Vec<HostRecord> = self.records.values().filter(|r| self.is_live(r, now)).cloned().collect();
        live.sort_by(rank_order);
        live.truncate(limit);
        live
    }
}

#[derive(Debug, Deserialize)]
struct RegisterRequest {
    host_id: String,
    address: String,
    capacity: HostCapacity,
    #[serde(default)]
    price: f64,
    #[serde(default)]
    memory_free: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct HeartbeatRequest {
    host_id: String,
    price: f64,
    #[serde(default)]
    memory_free: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct QueryRequest {
    #[serde(default = "default_limit")]
    limit: usize,
}

fn default_limit() -> usize {
    100
}

/// Serves `sls.register`, `sls.heartbeat`, and `sls.query`. State is soft:
/// after a restart the table is empty until hosts heartbeat and re-register.
pub struct DirectoryService {
    directory: Directory,
}

impl DirectoryService {
    pub fn new(liveness_window: f64) -> Self {
        DirectoryService { directory: Directory::new(liveness_window) }
    }

    pub fn directory(&self) -> &Directory {
        &self.directory
    }

    fn sweep(&mut self, ctx: &mut dyn Context) {
        for host_id in self.directory.evict(ctx.now()) {
            ctx.record("sls.evict", json!({"host": host_id}));
        }
    }

    fn schedule_sweep(&self, ctx: &mut dyn Context) {
        let at = ctx.now().after(self.directory.liveness_window() / 3.0);
        ctx.set_timer(at, json!("sweep"));
    }

    fn handle(&mut self, ctx: &mut dyn Context, msg: &Envelope) -> Result<Value, DirectoryError> {
        let bad = |e: serde_json::Error| DirectoryError::Malformed(e.to_string());
        let now = ctx.now();
        match msg.msg_type.as_str() {
            "sls.register" => {
                let req: RegisterRequest = msg.body_as().map_err(bad)?;
                let record = HostRecord {
                    host_id: req.host_id.clone(),
                    address: req.address,
                    capacity: req.capacity,
                    current_price: req.price,
                    last_heartbeat: now,
                    memory_free: req.memory_free,
                };
                self.directory.register(record, now)?;
                Ok(json!({"host_id": req.host_id}))
            }
            "sls.heartbeat" => {
                let req: HeartbeatRequest = msg.body_as().map_err(bad)?;
                self.directory.heartbeat(&req.host_id, req.price, req.memory_free, now)?;
                Ok(json!({"host_id": req.host_id}))
            }
            "sls.query" => {
                let req: QueryRequest = msg.body_as().map_err(bad)?;
                Ok(json!({"hosts": self.directory.query_ranked(req.limit, now)}))
            }
            other => Err(DirectoryError::Malformed(format!("unsupported message `{other}`"))),
        }
    }
}

impl Default for DirectoryService {
    fn default() -> Self {
        DirectoryService::new(DEFAULT_LIVENESS_WINDOW)
    }
}

impl Service for DirectoryService {
    fn on_start(&mut self, ctx: &mut dyn Context) {
        self.schedule_sweep(ctx);
    }

    fn on_message(&mut self, ctx: &mut dyn Context, msg: &Envelope) {
        if msg.msg_type.ends_with(".ok") || msg.msg_type.ends_with(".err") || msg.msg_type.starts_with("net.") {
            return;
        }
        self.sweep(ctx);
        match self.handle(ctx, msg) {
            Ok(body) => ctx.reply_ok(msg, body),
            Err(e) => ctx.reply_err(msg, e.code(), &e.to_string()),
        }
    }

    fn on_timer(&mut self, ctx: &mut dyn Context, _tag: &Value) {
        self.sweep(ctx);
        self.schedule_sweep(ctx);
    }

    fn on_restart(&mut self, ctx: &mut dyn Context) {
        self.directory = Directory::new(self.directory.liveness_window());
        self.schedule_sweep(ctx);
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
