//! Deployment engine over resolved descriptors.
//!
//! Each node deploys, then starts, then terminates. Deploy and start walk
//! the tree parent first and siblings in order: a child begins once its
//! parent's own phase is done, and a sibling once the previous sibling's own
//! phase is done, so independent subtrees make progress side by side. Every
//! node deploys before any node starts. Termination runs in exact reverse
//! of activation order.
//!
//! When a node ends abnormally (failed ping, dead VM, failed start), the
//! whole chain of compound ancestors above it is torn down. A node whose
//! parent is not a compound takes only its own subtree with it.

use std::any::Any;
use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::bidder::{initial_bid, select_host, BidPolicy};
use crate::descriptor::{self, path_string, resolve_reference, ComponentDescription, Target, Value, CLASS_ATTR};
use crate::directory::{HostRecord, DIRECTORY_ENDPOINT};
use crate::market::Credit;
use crate::simnet::{Context, Envelope, Service, TraceRecord, VmSpec, VmState};
use crate::time::SimTime;

pub const LIFECYCLE_ENDPOINT: &str = "lc";
pub const DEFAULT_PING_INTERVAL: f64 = 2.0;
pub const DEFAULT_BOOT_TIMEOUT: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeKind {
    Compound,
    StorageBackend,
    Domain,
    MarketDomain,
}

impl NodeKind {
    /// Kind bound by `sfClass`; a node without one is a compound.
    pub fn from_class(class: Option<&str>) -> Result<NodeKind, String> {
        match class {
            None | Some("Compound") => Ok(NodeKind::Compound),
            Some("StorageBackend") => Ok(NodeKind::StorageBackend),
            Some("Domain") => Ok(NodeKind::Domain),
            Some("MarketDomain") => Ok(NodeKind::MarketDomain),
            Some(other) => Err(format!("unknown sfClass `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeState {
    Init,
    Deployed,
    Started,
    Terminated,
    Failed,
}

impl fmt::Display for NodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeState::Init => "INIT",
            NodeState::Deployed => "DEPLOYED",
            NodeState::Started => "STARTED",
            NodeState::Terminated => "TERMINATED",
            NodeState::Failed => "FAILED",
        };
        f.write_str(s)
    }
}

/// The declared edges of the node state machine.
pub fn transition_allowed(from: NodeState, to: NodeState) -> bool {
    use NodeState::*;
    matches!(
        (from, to),
        (Init, Deployed) | (Deployed, Started) | (Deployed, Terminated) | (Started, Terminated) | (Failed, Terminated)
    ) || (to == Failed && from != Failed && from != Terminated)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Deploying,
    Starting,
    Running,
    Terminating,
    Terminated,
}

#[derive(Clone, Debug, Default)]
struct Runtime {
    /// Bumped to cancel outstanding timers.
    generation: u64,
    host: Option<String>,
    vm_id: Option<String>,
    token: Option<String>,
    snapshot: Option<String>,
    spec: Option<VmSpec>,
    boot_delay: f64,
    cleanup_delay: f64,
    ping_interval: f64,
    boot_timeout: f64,
    start_began: Option<SimTime>,
    policy: Option<(BidPolicy, String)>,
}

#[derive(Clone, Debug)]
pub struct LifecycleNode {
    pub path: Vec<String>,
    pub kind: NodeKind,
    pub state: NodeState,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    rt: Runtime,
}

impl LifecycleNode {
    pub fn vm_id(&self) -> Option<&str> {
        self.rt.vm_id.as_deref()
    }

    pub fn host(&self) -> Option<&str> {
        self.rt.host.as_deref()
    }

    /// Seconds between liveness checks; meaningful for domains.
    pub fn ping_interval(&self) -> f64 {
        self.rt.ping_interval
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Query,
    Submit,
}

/// One deployed descriptor tree and its progress.
pub struct Deployment {
    pub id: String,
    /// The resolved tree, with lazy references and run-time attributes
    /// filled in as nodes deploy.
    pub live: ComponentDescription,
    pub nodes: Vec<LifecycleNode>,
    pub phase: Phase,
    pub failed: bool,
    deploy_order: Vec<usize>,
    start_order: Vec<usize>,
    deploy_failed: Vec<usize>,
    in_flight: usize,
    halted: bool,
    sweep_after_flight: bool,
    sweep: VecDeque<usize>,
    /// Back-end whose cleanup is under way.
    cleaning: Option<usize>,
    requests: BTreeMap<String, (usize, Stage)>,
}

fn f64_attr(node: &ComponentDescription, name: &str, default: f64) -> Result<f64, String> {
    match node.attr(name) {
        None => Ok(default),
        Some(v) => v.as_f64().filter(|x| x.is_finite() && *x >= 0.0).ok_or_else(|| format!("`{name}` must be a non-negative number")),
    }
}

fn u64_attr(node: &ComponentDescription, name: &str, default: u64) -> Result<u64, String> {
    match node.attr(name) {
        None => Ok(default),
        Some(v) => v.as_i64().and_then(|i| u64::try_from(i).ok()).ok_or_else(|| format!("`{name}` must be a non-negative integer")),
    }
}

fn str_attr(node: &ComponentDescription, name: &str) -> Result<Option<String>, String> {
    match node.attr(name) {
        None => Ok(None),
        Some(Value::Str(s)) => Ok(Some(s.clone())),
        Some(_) => Err(format!("`{name}` must be a string")),
    }
}

fn vm_spec(node: &ComponentDescription) -> Result<VmSpec, String> {
    let d = VmSpec::default();
    let spec = VmSpec {
        vcpus: u32::try_from(u64_attr(node, "vcpus", d.vcpus as u64)?).map_err(|e| e.to_string())?,
        memory: u64_attr(node, "memory", d.memory)?,
        image: str_attr(node, "image")?.unwrap_or(d.image),
        disk: u64_attr(node, "disk", d.disk)?,
        swap: u64_attr(node, "swap", d.swap)?,
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

impl Deployment {
    /// Builds the node table from a resolved tree.
    pub fn new(id: &str, tree: ComponentDescription) -> Result<Deployment, String> {
        let mut nodes: Vec<LifecycleNode> = Vec::new();
        for path in tree.paths() {
            let desc = tree.at(&path).expect("path from paths()");
            let class = match desc.attr(CLASS_ATTR) {
                None => None,
                Some(Value::Str(s)) => Some(s.as_str()),
                Some(_) => return Err(format!("{}: sfClass must be a string", path_string(&path))),
            };
            let kind = NodeKind::from_class(class).map_err(|e| format!("{}: {e}", path_string(&path)))?;
            let parent = (!path.is_empty()).then(|| {
                let parent_path = &path[..path.len() - 1];
                nodes.iter().position(|n| n.path == parent_path).expect("parents precede children in pre-order")
            });
            let idx = nodes.len();
            if let Some(p) = parent {
                nodes[p].children.push(idx);
            }
            nodes.push(LifecycleNode { path, kind, state: NodeState::Init, parent, children: Vec::new(), rt: Runtime::default() });
        }
        Ok(Deployment {
            id: id.to_string(),
            live: tree,
            nodes,
            phase: Phase::Deploying,
            failed: false,
            deploy_order: Vec::new(),
            start_order: Vec::new(),
            deploy_failed: Vec::new(),
            in_flight: 0,
            halted: false,
            sweep_after_flight: false,
            sweep: VecDeque::new(),
            cleaning: None,
            requests: BTreeMap::new(),
        })
    }

    pub fn node_by_path(&self, path: &str) -> Option<&LifecycleNode> {
        self.nodes.iter().find(|n| path_string(&n.path) == path || n.path.join(":") == path)
    }

    fn name(&self, idx: usize) -> String {
        path_string(&self.nodes[idx].path)
    }

    fn desc(&self, idx: usize) -> &ComponentDescription {
        self.live.at(&self.nodes[idx].path).expect("live tree mirrors the node table")
    }

    fn desc_mut(&mut self, idx: usize) -> &mut ComponentDescription {
        let path = self.nodes[idx].path.clone();
        self.live.at_mut(&path).expect("live tree mirrors the node table")
    }

    fn timer(&self, ctx: &mut dyn Context, idx: usize, at: SimTime, kind: &str) {
        let tag = json!({"dep": self.id, "node": idx, "gen": self.nodes[idx].rt.generation, "kind": kind});
        ctx.set_timer(at, tag);
    }

    fn set_state(&mut self, ctx: &mut dyn Context, idx: usize, to: NodeState) {
        let from = self.nodes[idx].state;
        let node = self.name(idx);
        if !transition_allowed(from, to) {
            log::error!("deployment {}: refused {node} {from} -> {to}", self.id);
            ctx.record("lc.illegal", json!({"deployment": self.id, "node": node, "from": from, "to": to}));
            return;
        }
        self.nodes[idx].state = to;
        ctx.record("lc.transition", json!({"deployment": self.id, "node": node, "from": from, "to": to}));
        ctx.trace(TraceRecord { at: ctx.now(), deployment: self.id.clone(), node, from: from.to_string(), to: to.to_string() });
    }

    fn next_sibling(&self, idx: usize) -> Option<usize> {
        let p = self.nodes[idx].parent?;
        let sibs = &self.nodes[p].children;
        let i = sibs.iter().position(|&c| c == idx).expect("child listed under its parent");
        sibs.get(i + 1).copied()
    }

    fn subtree(&self, idx: usize) -> Vec<usize> {
        let mut out = vec![idx];
        let mut i = 0;
        while i < out.len() {
            out.extend(self.nodes[out[i]].children.iter().copied());
            i += 1;
        }
        out
    }

    /// Nodes in the order they should be terminated.
    fn teardown_order(&self, members: &[usize]) -> Vec<usize> {
        let mut activation: Vec<usize> = self.start_order.clone();
        activation.extend(self.deploy_order.iter().filter(|i| !self.start_order.contains(i)));
        let mut out: Vec<usize> = self.deploy_failed.iter().rev().copied().collect();
        out.extend(activation.into_iter().rev());
        out.extend(members.iter().filter(|&&i| self.nodes[i].state == NodeState::Failed));
        let mut seen = Vec::new();
        for i in out {
            if members.contains(&i) && !seen.contains(&i) {
                seen.push(i);
            }
        }
        seen
    }

    // ---- deploy ----------------------------------------------------------

    /// Resolves the node's lazy references against the live tree.
    fn resolve_lazy(&mut self, idx: usize) -> Result<(), String> {
        let path = self.nodes[idx].path.clone();
        let lazies: Vec<(String, descriptor::Reference)> = self
            .desc(idx)
            .attributes
            .iter()
            .filter_map(|(k, v)| match v {
                Value::Ref(r) if r.lazy => Some((k.clone(), r.clone())),
                _ => None,
            })
            .collect();
        for (name, r) in lazies {
            let target = resolve_reference(&self.live, &path, &name, &r).map_err(|e| e.to_string())?;
            let node = self.desc_mut(idx);
            match target {
                Target::Value(v) => {
                    node.attributes.insert(name, v);
                }
                Target::Component(mut c) => {
                    node.attributes.shift_remove(&name);
                    c.name = name.clone();
                    node.children.insert(name, c);
                }
            }
        }
        Ok(())
    }

    fn begin_deploy(&mut self, ctx: &mut dyn Context, idx: usize) {
        if self.halted {
            return;
        }
        if let Err(e) = self.resolve_lazy(idx) {
            return self.deploy_failed(ctx, idx, &e);
        }
        let result = match self.nodes[idx].kind {
            NodeKind::Compound => Ok(true),
            NodeKind::Domain => self.configure_domain(idx).map(|()| true),
            NodeKind::StorageBackend => self.prepare_backend(ctx, idx).map(|()| false),
            NodeKind::MarketDomain => self.query_market(ctx, idx).map(|()| false),
        };
        match result {
            Ok(true) => self.deployed(ctx, idx),
            Ok(false) => self.in_flight += 1,
            Err(e) => self.deploy_failed(ctx, idx, &e),
        }
    }

    fn configure_domain(&mut self, idx: usize) -> Result<(), String> {
        let desc = self.desc(idx);
        let ping = f64_attr(desc, "pingInterval", DEFAULT_PING_INTERVAL)?;
        let timeout = f64_attr(desc, "bootTimeout", DEFAULT_BOOT_TIMEOUT)?;
        if ping <= 0.0 {
            return Err("`pingInterval` must be positive".into());
        }
        let vm = match str_attr(desc, "vmId")? {
            Some(v) => Some(v),
            None => self.inferred_vm(idx),
        };
        let vm = vm.ok_or("no vm to monitor: set `vmId` or place the domain after a storage back-end or under a market domain")?;
        let rt = &mut self.nodes[idx].rt;
        rt.ping_interval = ping;
        rt.boot_timeout = timeout;
        rt.vm_id = Some(vm);
        Ok(())
    }

    fn inferred_vm(&self, idx: usize) -> Option<String> {
        let p = self.nodes[idx].parent?;
        if self.nodes[p].kind == NodeKind::MarketDomain {
            return self.nodes[p].rt.vm_id.clone();
        }
        let sibs = &self.nodes[p].children;
        let me = sibs.iter().position(|&c| c == idx)?;
        sibs[..me].iter().rev().find(|&&s| self.nodes[s].kind == NodeKind::StorageBackend).and_then(|&s| self.nodes[s].rt.vm_id.clone())
    }

    fn prepare_backend(&mut self, ctx: &mut dyn Context, idx: usize) -> Result<(), String> {
        let desc = self.desc(idx);
        let host = str_attr(desc, "host")?.ok_or("storage back-end needs a `host`")?;
        let spec = vm_spec(desc)?;
        let boot_delay = f64_attr(desc, "bootDelay", 5.0)?;
        let prepare = f64_attr(desc, "prepareDelay", 1.0)?;
        let cleanup = f64_attr(desc, "cleanupDelay", 1.0)?;
        let vm_id = format!("{}:{}", self.id, self.name(idx));
        let snapshot = ctx.hosts().ledger_snapshot(&host).ok_or_else(|| format!("unknown host `{host}`"))?;
        ctx.hosts().prepare_image(&host, &vm_id, spec.disk + spec.swap).map_err(|e| e.to_string())?;
        ctx.record("lc.snapshot", json!({"deployment": self.id, "node": self.name(idx), "host": host, "ledger": snapshot}));
        let rt = &mut self.nodes[idx].rt;
        rt.host = Some(host.clone());
        rt.token = Some(vm_id.clone());
        rt.vm_id = Some(vm_id.clone());
        rt.snapshot = Some(snapshot);
        rt.spec = Some(spec);
        rt.boot_delay = boot_delay;
        rt.cleanup_delay = cleanup;
        let node = self.desc_mut(idx);
        node.attributes.insert("vmId".into(), Value::Str(vm_id));
        let at = ctx.now().after(prepare);
        self.timer(ctx, idx, at, "prepared");
        Ok(())
    }

    fn query_market(&mut self, ctx: &mut dyn Context, idx: usize) -> Result<(), String> {
        let desc = self.desc(idx);
        let account = str_attr(desc, "account")?.ok_or("market domain needs an `account`")?;
        let budget: Credit = match desc.attr("budget") {
            Some(Value::Str(s)) => s.parse().map_err(|e| format!("`budget`: {e}"))?,
            Some(Value::Int(i)) if *i > 0 => Credit::from_units(*i as u64),
            _ => return Err("`budget` must be a credit amount".into()),
        };
        let policy = BidPolicy {
            target_share: f64_attr(desc, "targetShare", 0.5)?,
            budget,
            planned_duration: f64_attr(desc, "duration", 100.0)?,
            check_interval: 1.0,
        };
        policy.validate().map_err(|e| e.to_string())?;
        let spec = vm_spec(desc)?;
        let rt = &mut self.nodes[idx].rt;
        rt.policy = Some((policy, account));
        rt.spec = Some(spec);
        let req = ctx.send(DIRECTORY_ENDPOINT, "sls.query", json!({"limit": 100}));
        self.requests.insert(req, (idx, Stage::Query));
        Ok(())
    }

    fn on_market_reply(&mut self, ctx: &mut dyn Context, msg: &Envelope) {
        let Some((idx, stage)) = self.requests.remove(&msg.request_id) else { return };
        // Once halted, a node that has not deployed yet just stays in INIT.
        let fail = |this: &mut Self, ctx: &mut dyn Context, why: String| {
            this.in_flight -= 1;
            if this.halted {
                this.flight_landed(ctx)
            } else {
                this.deploy_failed(ctx, idx, &why)
            }
        };
        match (stage, msg.msg_type.as_str()) {
            (Stage::Query, "sls.query.ok") => {
                let hosts: Vec<HostRecord> = msg.body.get("hosts").cloned().and_then(|h| serde_json::from_value(h).ok()).unwrap_or_default();
                let (policy, account) = self.nodes[idx].rt.policy.clone().expect("set before the query");
                let spec = self.nodes[idx].rt.spec.clone().expect("set before the query");
                if self.halted {
                    return fail(self, ctx, String::new());
                }
                match select_host(&policy, &spec, &hosts) {
                    Ok(sel) => {
                        let bid_id = format!("{}:{}", self.id, self.name(idx));
                        let bid = initial_bid(&policy, &bid_id, &account, ctx.now());
                        let req = ctx.send(&sel.host.address, "auc.submit", json!({"bid": bid, "spec": spec}));
                        ctx.record("lc.place", json!({"deployment": self.id, "node": self.name(idx), "host": sel.host.host_id}));
                        self.requests.insert(req, (idx, Stage::Submit));
                    }
                    Err(e) => fail(self, ctx, e.to_string()),
                }
            }
            (Stage::Submit, "auc.submit.ok") => {
                let host = msg.body.get("host").and_then(Json::as_str).unwrap_or_default().to_string();
                let vm = msg.body.get("vm_id").and_then(Json::as_str).unwrap_or_default().to_string();
                let bid = msg.body.get("bid_id").and_then(Json::as_str).unwrap_or_default().to_string();
                let rt = &mut self.nodes[idx].rt;
                rt.host = Some(host.clone());
                rt.vm_id = Some(vm.clone());
                let node = self.desc_mut(idx);
                node.attributes.insert("host".into(), Value::Str(host));
                node.attributes.insert("vmId".into(), Value::Str(vm));
                node.attributes.insert("bidId".into(), Value::Str(bid));
                self.in_flight -= 1;
                self.deployed(ctx, idx);
            }
            (_, ty) => {
                let why = msg.body.get("message").and_then(Json::as_str).map(str::to_string).unwrap_or_else(|| ty.to_string());
                fail(self, ctx, why)
            }
        }
    }

    fn deployed(&mut self, ctx: &mut dyn Context, idx: usize) {
        self.set_state(ctx, idx, NodeState::Deployed);
        self.deploy_order.push(idx);
        if self.halted {
            return self.flight_landed(ctx);
        }
        if let Some(&first) = self.nodes[idx].children.first() {
            self.begin_deploy(ctx, first);
        }
        if let Some(next) = self.next_sibling(idx) {
            self.begin_deploy(ctx, next);
        }
        if self.phase == Phase::Deploying && !self.halted && self.deploy_order.len() == self.nodes.len() {
            self.phase = Phase::Starting;
            self.begin_start(ctx, 0);
        }
    }

    fn deploy_failed(&mut self, ctx: &mut dyn Context, idx: usize, why: &str) {
        ctx.record("lc.error", json!({"deployment": self.id, "node": self.name(idx), "reason": why}));
        self.set_state(ctx, idx, NodeState::Failed);
        self.deploy_failed.push(idx);
        if self.nodes[0].state != NodeState::Failed {
            self.set_state(ctx, 0, NodeState::Failed);
        }
        self.failed = true;
        self.halted = true;
        self.sweep_after_flight = true;
        self.flight_landed(ctx);
    }

    /// Starts a pending full teardown once no deploy step is still running.
    fn flight_landed(&mut self, ctx: &mut dyn Context) {
        if self.in_flight == 0 && self.sweep_after_flight {
            self.sweep_after_flight = false;
            let all: Vec<usize> = (0..self.nodes.len()).collect();
            self.enqueue(ctx, &all);
        }
    }

    // ---- start -----------------------------------------------------------

    fn begin_start(&mut self, ctx: &mut dyn Context, idx: usize) {
        if self.halted {
            return;
        }
        if self.nodes[idx].state != NodeState::Deployed || self.sweep.contains(&idx) {
            return self.start_next(ctx, idx);
        }
        match self.nodes[idx].kind {
            NodeKind::Compound | NodeKind::MarketDomain => self.started(ctx, idx),
            NodeKind::StorageBackend => match self.boot_backend(ctx, idx) {
                Ok(()) => self.started(ctx, idx),
                Err(e) => self.start_failed(ctx, idx, &e),
            },
            NodeKind::Domain => {
                self.nodes[idx].rt.start_began = Some(ctx.now());
                self.ping(ctx, idx);
            }
        }
    }

    fn boot_backend(&mut self, ctx: &mut dyn Context, idx: usize) -> Result<(), String> {
        let rt = &self.nodes[idx].rt;
        let (host, vm, spec, delay) = (rt.host.clone().unwrap(), rt.vm_id.clone().unwrap(), rt.spec.clone().unwrap(), rt.boot_delay);
        let me = ctx.me().to_string();
        ctx.hosts().create_vm(&host, &vm, spec, &me).map_err(|e| e.to_string())?;
        ctx.boot_vm(&vm, delay).map_err(|e| e.to_string())?;
        Ok(())
    }

    fn started(&mut self, ctx: &mut dyn Context, idx: usize) {
        self.set_state(ctx, idx, NodeState::Started);
        self.start_order.push(idx);
        if self.halted {
            return;
        }
        if let Some(&first) = self.nodes[idx].children.first() {
            self.begin_start(ctx, first);
        }
        self.start_next(ctx, idx);
        if self.phase == Phase::Starting && self.nodes.iter().all(|n| matches!(n.state, NodeState::Started | NodeState::Terminated)) {
            self.phase = Phase::Running;
            ctx.record("lc.running", json!({"deployment": self.id}));
        }
    }

    fn start_next(&mut self, ctx: &mut dyn Context, idx: usize) {
        if let Some(next) = self.next_sibling(idx) {
            self.begin_start(ctx, next);
        }
    }

    fn start_failed(&mut self, ctx: &mut dyn Context, idx: usize, why: &str) {
        self.abnormal(ctx, idx, why);
        self.start_next(ctx, idx);
    }

    fn ping(&mut self, ctx: &mut dyn Context, idx: usize) {
        let rt = &self.nodes[idx].rt;
        let vm = rt.vm_id.clone().expect("domains know their vm once deployed");
        let (interval, deadline) = (rt.ping_interval, rt.start_began.expect("set at start").after(rt.boot_timeout));
        let state = ctx.hosts().find_vm(&vm).map(|v| v.state);
        match state {
            Some(VmState::Running) => {
                self.started(ctx, idx);
                let at = ctx.now().after(interval);
                self.timer(ctx, idx, at, "live");
            }
            None | Some(VmState::Dead) | Some(VmState::Terminating) => self.start_failed(ctx, idx, "vm died while booting"),
            Some(_) if ctx.now() >= deadline => self.start_failed(ctx, idx, "boot timeout"),
            Some(_) => {
                let at = ctx.now().after(interval).min(deadline);
                self.timer(ctx, idx, at, "ping");
            }
        }
    }

    fn liveness(&mut self, ctx: &mut dyn Context, idx: usize) {
        let vm = self.nodes[idx].rt.vm_id.clone().expect("domains know their vm");
        let alive = ctx.hosts().find_vm(&vm).is_some_and(|v| matches!(v.state, VmState::Running));
        if alive {
            let at = ctx.now().after(self.nodes[idx].rt.ping_interval);
            self.timer(ctx, idx, at, "live");
            return;
        }
        let me = ctx.me().to_string();
        ctx.hosts().remove_vm(&vm, &me);
        ctx.record("lc.vm_death", json!({"deployment": self.id, "node": self.name(idx), "vm": vm}));
        self.abnormal(ctx, idx, "vm died");
    }

    // ---- termination -----------------------------------------------------

    /// Fails `idx` and tears down its compound group.
    fn abnormal(&mut self, ctx: &mut dyn Context, idx: usize, why: &str) {
        let state = self.nodes[idx].state;
        if matches!(state, NodeState::Failed | NodeState::Terminated) || self.sweep.contains(&idx) || self.cleaning == Some(idx) {
            return;
        }
        ctx.record("lc.error", json!({"deployment": self.id, "node": self.name(idx), "reason": why}));
        self.nodes[idx].rt.generation += 1;
        self.set_state(ctx, idx, NodeState::Failed);
        let mut top = idx;
        while let Some(p) = self.nodes[top].parent {
            if self.nodes[p].kind != NodeKind::Compound {
                break;
            }
            top = p;
        }
        if top == 0 {
            self.failed = true;
            self.halted = true;
        }
        let members = self.subtree(top);
        self.enqueue(ctx, &members);
    }

    /// Scripted termination of the whole deployment.
    pub fn terminate(&mut self, ctx: &mut dyn Context) {
        self.halted = true;
        if self.in_flight > 0 {
            self.sweep_after_flight = true;
            return;
        }
        let all: Vec<usize> = (0..self.nodes.len()).collect();
        self.enqueue(ctx, &all);
    }

    fn enqueue(&mut self, ctx: &mut dyn Context, members: &[usize]) {
        self.phase = Phase::Terminating;
        let mut batch = Vec::new();
        for i in self.teardown_order(members) {
            let live = matches!(self.nodes[i].state, NodeState::Deployed | NodeState::Started | NodeState::Failed);
            if live && !self.sweep.contains(&i) && self.cleaning != Some(i) {
                self.sweep.push_back(i);
                batch.push(self.name(i));
            }
        }
        if !batch.is_empty() {
            ctx.record("lc.sweep", json!({"deployment": self.id, "nodes": batch}));
        }
        self.pump(ctx);
    }

    fn pump(&mut self, ctx: &mut dyn Context) {
        while self.cleaning.is_none() {
            let Some(idx) = self.sweep.pop_front() else {
                return self.sweep_done(ctx);
            };
            if matches!(self.nodes[idx].state, NodeState::Init | NodeState::Terminated) {
                continue;
            }
            self.nodes[idx].rt.generation += 1;
            if self.nodes[idx].kind == NodeKind::StorageBackend && self.nodes[idx].rt.token.is_some() {
                self.cleanup_backend(ctx, idx);
                self.cleaning = Some(idx);
                let at = ctx.now().after(self.nodes[idx].rt.cleanup_delay);
                self.timer(ctx, idx, at, "cleaned");
            } else {
                self.set_state(ctx, idx, NodeState::Terminated);
            }
        }
    }

    fn cleanup_backend(&mut self, ctx: &mut dyn Context, idx: usize) {
        let rt = &self.nodes[idx].rt;
        let (host, token, vm) = (rt.host.clone().unwrap(), rt.token.clone().unwrap(), rt.vm_id.clone().unwrap());
        let me = ctx.me().to_string();
        ctx.hosts().remove_vm(&vm, &me);
        if !ctx.hosts().cleanup_image(&host, &token) {
            ctx.record("lc.error", json!({"deployment": self.id, "node": self.name(idx), "reason": "image token already gone"}));
        }
    }

    fn cleaned(&mut self, ctx: &mut dyn Context, idx: usize) {
        let rt = &self.nodes[idx].rt;
        let host = rt.host.clone().unwrap();
        let now = ctx.hosts().ledger_snapshot(&host);
        let restored = now.is_some() && now == rt.snapshot;
        ctx.record("lc.restore", json!({"deployment": self.id, "node": self.name(idx), "host": host, "restored": restored}));
        self.set_state(ctx, idx, NodeState::Terminated);
        self.cleaning = None;
        self.pump(ctx);
    }

    fn sweep_done(&mut self, ctx: &mut dyn Context) {
        let done = self.nodes.iter().all(|n| matches!(n.state, NodeState::Init | NodeState::Terminated));
        if done && self.phase != Phase::Terminated && self.in_flight == 0 {
            self.phase = Phase::Terminated;
            ctx.record("lc.done", json!({"deployment": self.id, "failed": self.failed}));
        } else if !done && self.phase == Phase::Terminating {
            self.phase = if self.nodes.iter().all(|n| n.state != NodeState::Deployed) { Phase::Running } else { Phase::Starting };
        }
    }

    fn on_timer(&mut self, ctx: &mut dyn Context, idx: usize, generation: u64, kind: &str) {
        if self.nodes[idx].rt.generation != generation {
            return;
        }
        match kind {
            "prepared" => {
                self.in_flight -= 1;
                self.deployed(ctx, idx);
            }
            "ping" if self.nodes[idx].state == NodeState::Deployed => self.ping(ctx, idx),
            "live" if self.nodes[idx].state == NodeState::Started => self.liveness(ctx, idx),
            "cleaned" => self.cleaned(ctx, idx),
            _ => {}
        }
    }

    pub fn status(&self) -> Json {
        let nodes: Vec<Json> = self
            .nodes
            .iter()
            .map(|n| {
                let mut v = json!({"node": path_string(&n.path), "kind": n.kind, "state": n.state});
                if let Some(h) = &n.rt.host {
                    v["host"] = json!(h);
                }
                if let Some(vm) = &n.rt.vm_id {
                    v["vm"] = json!(vm);
                }
                v
            })
            .collect();
        json!({"deployment": self.id, "phase": self.phase, "failed": self.failed, "nodes": nodes})
    }
}

#[derive(Debug, Deserialize)]
struct DeployRequest {
    deployment: String,
    source: String,
    #[serde(default)]
    includes: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct DeploymentRef {
    deployment: String,
}

/// Serves `lc.deploy`, `lc.terminate`, and `lc.status`.
#[derive(Default)]
pub struct LifecycleService {
    deployments: BTreeMap<String, Deployment>,
}

impl LifecycleService {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn deployment(&self, id: &str) -> Option<&Deployment> {
        self.deployments.get(id)
    }

    pub fn deployments(&self) -> impl Iterator<Item = &Deployment> {
        self.deployments.values()
    }

    fn deploy(&mut self, ctx: &mut dyn Context, msg: &Envelope) -> Result<Json, (String, String)> {
        let req: DeployRequest = msg.body_as().map_err(|e| ("malformed".into(), e.to_string()))?;
        if self.deployments.contains_key(&req.deployment) {
            return Err(("duplicate_deployment".into(), format!("deployment `{}` exists", req.deployment)));
        }
        let parse_err = |e: descriptor::DescriptorError| ("descriptor".to_string(), e.to_string());
        let includes = req.includes.iter().map(|s| descriptor::parse_file(s)).collect::<Result<Vec<_>, _>>().map_err(parse_err)?;
        let tree = descriptor::resolve_source(&req.source, &includes).map_err(parse_err)?;
        let mut dep = Deployment::new(&req.deployment, tree).map_err(|e| ("descriptor".to_string(), e))?;
        let nodes: Vec<String> = dep.nodes.iter().map(|n| path_string(&n.path)).collect();
        ctx.record("lc.accept", json!({"deployment": req.deployment, "nodes": nodes}));
        dep.begin_deploy(ctx, 0);
        self.deployments.insert(req.deployment.clone(), dep);
        Ok(json!({"deployment": req.deployment}))
    }

    fn handle(&mut self, ctx: &mut dyn Context, msg: &Envelope) -> Result<Json, (String, String)> {
        match msg.msg_type.as_str() {
            "lc.deploy" => self.deploy(ctx, msg),
            "lc.terminate" | "lc.status" => {
                let req: DeploymentRef = msg.body_as().map_err(|e| ("malformed".to_string(), e.to_string()))?;
                let dep = self
                    .deployments
                    .get_mut(&req.deployment)
                    .ok_or_else(|| ("unknown_deployment".to_string(), format!("no deployment `{}`", req.deployment)))?;
                if msg.msg_type == "lc.terminate" {
                    dep.terminate(ctx);
                }
                Ok(dep.status())
            }
            other => Err(("malformed".into(), format!("unsupported message `{other}`"))),
        }
    }
}

impl Service for LifecycleService {
    fn on_message(&mut self, ctx: &mut dyn Context, msg: &Envelope) {
        if msg.msg_type.starts_with("lc.") && !msg.msg_type.ends_with(".ok") && !msg.msg_type.ends_with(".err") {
            match self.handle(ctx, msg) {
                Ok(body) => ctx.reply_ok(msg, body),
                Err((code, message)) => ctx.reply_err(msg, &code, &message),
            }
            return;
        }
        if let Some(dep) = self.deployments.values_mut().find(|d| d.requests.contains_key(&msg.request_id)) {
            dep.on_market_reply(ctx, msg);
        }
    }

    fn on_timer(&mut self, ctx: &mut dyn Context, tag: &Json) {
        let dep = tag.get("dep").and_then(Json::as_str).unwrap_or_default();
        let idx = tag.get("node").and_then(Json::as_u64).unwrap_or(u64::MAX) as usize;
        let generation = tag.get("gen").and_then(Json::as_u64).unwrap_or(u64::MAX);
        let kind = tag.get("kind").and_then(Json::as_str).unwrap_or_default();
        if let Some(d) = self.deployments.get_mut(dep) {
            if idx < d.nodes.len() {
                d.on_timer(ctx, idx, generation, kind);
            }
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
