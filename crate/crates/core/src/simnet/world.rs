//! The deterministic scenario runtime: one virtual clock, one ordered event
//! queue, every service and host in a single thread.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::simnet::envelope::{type_matches, Envelope, ENVELOPE_VERSION};
use crate::simnet::host::{HostError, HostEvent, HostTable, SimHost};
use crate::simnet::service::{Context, Service, TraceRecord};
use crate::time::SimTime;

pub const DEFAULT_LATENCY: f64 = 0.01;

/// Sender name used for bus-generated delivery failures.
pub const NET_ENDPOINT: &str = "net";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("cannot move the clock back from {now} to {to}")]
    TimeReversal { now: SimTime, to: SimTime },
    #[error("unknown fault target `{0}`")]
    UnknownTarget(String),
    #[error("endpoint `{0}` is already registered")]
    DuplicateEndpoint(String),
    #[error("fault scheduled in the past ({at} < {now})")]
    FaultInPast { at: SimTime, now: SimTime },
    #[error(transparent)]
    Host(#[from] HostError),
}

/// Selects envelopes to discard.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropRule {
    /// Exact message type, or a prefix ending in `*`.
    pub msg_type: String,
    pub from: Option<String>,
    pub to: Option<String>,
    /// How many more matching envelopes to discard.
    pub remaining: u32,
}

impl DropRule {
    pub fn next(msg_type: impl Into<String>) -> Self {
        DropRule { msg_type: msg_type.into(), from: None, to: None, remaining: 1 }
    }

    fn matches(&self, env: &Envelope) -> bool {
        self.remaining > 0
            && type_matches(&self.msg_type, &env.msg_type)
            && self.from.as_deref().is_none_or(|f| f == env.sender)
            && self.to.as_deref().is_none_or(|t| t == env.recipient)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Fault {
    VmKill { vm_id: String },
    MessageDrop(DropRule),
    ServiceCrash { endpoint: String },
    ServiceRestart { endpoint: String },
}

#[derive(Clone, Debug)]
pub struct NetConfig {
    pub default_latency: f64,
    /// Uniform extra delay in `[0, jitter)`, drawn from the seeded generator.
    pub jitter: f64,
    links: BTreeMap<(String, String), f64>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { default_latency: DEFAULT_LATENCY, jitter: 0.0, links: BTreeMap::new() }
    }
}

impl NetConfig {
    pub fn set_link(&mut self, from: &str, to: &str, latency: f64) {
        self.links.insert((from.to_string(), to.to_string()), latency);
    }

    pub fn latency(&self, from: &str, to: &str) -> f64 {
        self.links.get(&(from.to_string(), to.to_string())).copied().unwrap_or(self.default_latency)
    }
}

enum Event {
    Deliver(Envelope),
    Timer { endpoint: String, epoch: u64, tag: Value },
    VmReady { vm_id: String },
    Fault(Fault),
}

struct Slot {
    service: Option<Box<dyn Service>>,
    crashed: bool,
    epoch: u64,
}

struct Core {
    now: SimTime,
    seq: u64,
    queue: BTreeMap<(SimTime, u64), Event>,
    hosts: HostTable,
    log: Vec<String>,
    trace: Vec<TraceRecord>,
    net: NetConfig,
    drops: Vec<DropRule>,
    next_request: u64,
    next_record: u64,
    rng: ChaCha8Rng,
    epochs: BTreeMap<String, u64>,
}

impl Core {
    fn schedule(&mut self, at: SimTime, event: Event) {
        self.seq += 1;
        self.queue.insert((at, self.seq), event);
    }

    fn record(&mut self, kind: &str, body: Value) {
        self.next_record += 1;
        let env = Envelope {
            version: ENVELOPE_VERSION,
            msg_type: kind.to_string(),
            request_id: format!("o{}", self.next_record),
            sender: "sim".into(),
            recipient: "log".into(),
            body,
            sent_at: self.now,
        };
        self.log.push(env.canonical());
    }

    fn post(&mut self, env: Envelope) {
        self.log.push(env.canonical());
        if let Some(rule) = self.drops.iter_mut().find(|r| r.matches(&env)) {
            rule.remaining -= 1;
            let request_id = env.request_id.clone();
            self.drops.retain(|r| r.remaining > 0);
            self.record("sim.drop", json!({"request_id": request_id, "msg_type": env.msg_type}));
            return;
        }
        let mut delay = self.net.latency(&env.sender, &env.recipient);
        if self.net.jitter > 0.0 {
            delay += self.rng.gen_range(0.0..self.net.jitter);
        }
        let at = self.now.after(delay);
        self.schedule(at, Event::Deliver(env));
    }

    fn new_envelope(&mut self, from: &str, to: &str, msg_type: &str, body: Value, request_id: Option<String>) -> Envelope {
        let request_id = request_id.unwrap_or_else(|| {
            self.next_request += 1;
            format!("r{}", self.next_request)
        });
        Envelope {
            version: ENVELOPE_VERSION,
            msg_type: msg_type.to_string(),
            request_id,
            sender: from.to_string(),
            recipient: to.to_string(),
            body,
            sent_at: self.now,
        }
    }

    /// Publishes VM changes to the log and tells owners about VMs they lost.
    fn flush_host_events(&mut self) {
        for event in self.hosts.drain_events() {
            match event {
                HostEvent::Changed { host_id, vm_id, state, cpu_rate } => {
                    self.record("sim.vm", json!({"host": host_id, "vm": vm_id, "state": state, "cpu_rate": cpu_rate}));
                }
                HostEvent::Gone { host_id, vm_id, owner, reason } => {
                    let from = format!("host/{host_id}");
                    let env = self.new_envelope(&from, &owner, "host.vm_gone", json!({"host": host_id, "vm_id": vm_id, "reason": reason}), None);
                    self.post(env);
                }
            }
        }
    }
}

struct Ctx<'a> {
    core: &'a mut Core,
    me: &'a str,
}

impl Context for Ctx<'_> {
    fn now(&self) -> SimTime {
        self.core.now
    }

    fn me(&self) -> &str {
        self.me
    }

    fn send(&mut self, to: &str, msg_type: &str, body: Value) -> String {
        let env = self.core.new_envelope(self.me, to, msg_type, body, None);
        let id = env.request_id.clone();
        self.core.post(env);
        id
    }

    fn reply(&mut self, request: &Envelope, msg_type: &str, body: Value) {
        let env = self.core.new_envelope(self.me, &request.sender, msg_type, body, Some(request.request_id.clone()));
        self.core.post(env);
    }

    fn set_timer(&mut self, at: SimTime, tag: Value) {
        let at = at.max(self.core.now);
        let epoch = self.core.epochs.get(self.me).copied().unwrap_or(0);
        self.core.schedule(at, Event::Timer { endpoint: self.me.to_string(), epoch, tag });
    }

    fn hosts(&mut self) -> &mut HostTable {
        &mut self.core.hosts
    }

    fn boot_vm(&mut self, vm_id: &str, delay: f64) -> Result<SimTime, HostError> {
        let ready = self.core.hosts.start_boot(vm_id, self.core.now, delay)?;
        self.core.schedule(ready, Event::VmReady { vm_id: vm_id.to_string() });
        Ok(ready)
    }

    fn record(&mut self, kind: &str, body: Value) {
        self.core.record(kind, body);
    }

    fn trace(&mut self, record: TraceRecord) {
        self.core.trace.push(record);
    }

    fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.core.rng
    }
}

/// Deterministic simulation of services, hosts, and the network between them.
pub struct World {
    core: Core,
    services: BTreeMap<String, Slot>,
    seed: u64,
}

impl World {
    pub fn new(seed: u64) -> Self {
        World {
            core: Core {
                now: SimTime::ZERO,
                seq: 0,
                queue: BTreeMap::new(),
                hosts: HostTable::new(),
                log: Vec::new(),
                trace: Vec::new(),
                net: NetConfig::default(),
                drops: Vec::new(),
                next_request: 0,
                next_record: 0,
                rng: ChaCha8Rng::seed_from_u64(seed),
                epochs: BTreeMap::new(),
            },
            services: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn now(&self) -> SimTime {
        self.core.now
    }

    pub fn net_mut(&mut self) -> &mut NetConfig {
        &mut self.core.net
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.core.rng
    }

    pub fn add_host(&mut self, host: SimHost) {
        self.core.hosts.insert(host);
    }

    pub fn hosts(&self) -> &HostTable {
        &self.core.hosts
    }

    pub fn hosts_mut(&mut self) -> &mut HostTable {
        &mut self.core.hosts
    }

    pub fn log(&self) -> &[String] {
        &self.core.log
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.core.trace
    }

    pub fn endpoints(&self) -> impl Iterator<Item = &String> {
        self.services.keys()
    }

    pub fn is_running(&self, endpoint: &str) -> bool {
        self.services.get(endpoint).is_some_and(|s| !s.crashed)
    }

    /// Registers a service and runs its `on_start` at the current instant.
    pub fn spawn(&mut self, endpoint: &str, service: Box<dyn Service>) -> Result<(), SimError> {
        if self.services.contains_key(endpoint) {
            return Err(SimError::DuplicateEndpoint(endpoint.to_string()));
        }
        self.services.insert(endpoint.to_string(), Slot { service: Some(service), crashed: false, epoch: 0 });
        self.core.record("sim.spawn", json!({"endpoint": endpoint}));
        self.dispatch(endpoint, |svc, ctx| svc.on_start(ctx));
        Ok(())
    }

    pub fn service<T: 'static>(&self, endpoint: &str) -> Option<&T> {
        self.services
            .get(endpoint)
            .and_then(|s| s.service.as_ref())
            .and_then(|s| s.as_any().downcast_ref::<T>())
    }

    /// Sends a message on behalf of `from`, which need not be a service.
    pub fn send(&mut self, from: &str, to: &str, msg_type: &str, body: Value) -> String {
        let env = self.core.new_envelope(from, to, msg_type, body, None);
        let id = env.request_id.clone();
        self.core.post(env);
        id
    }

    /// Appends an observation record to the message log.
    pub fn record(&mut self, kind: &str, body: Value) {
        self.core.record(kind, body);
    }

    pub fn inject_fault(&mut self, fault: Fault, at: SimTime) -> Result<(), SimError> {
        if at < self.core.now {
            return Err(SimError::FaultInPast { at, now: self.core.now });
        }
        match &fault {
            Fault::VmKill { vm_id } => {
                if self.core.hosts.find_vm(vm_id).is_none() {
                    return Err(SimError::UnknownTarget(vm_id.clone()));
                }
            }
            Fault::ServiceCrash { endpoint } | Fault::ServiceRestart { endpoint } => {
                if !self.services.contains_key(endpoint) {
                    return Err(SimError::UnknownTarget(endpoint.clone()));
                }
            }
            Fault::MessageDrop(rule) => {
                if rule.msg_type.is_empty() || rule.remaining == 0 {
                    return Err(SimError::UnknownTarget(rule.msg_type.clone()));
                }
            }
        }
        if at == self.core.now {
            self.apply_fault(fault);
        } else {
            self.core.schedule(at, Event::Fault(fault));
        }
        Ok(())
    }

    pub fn advance_by(&mut self, secs: f64) -> Result<usize, SimError> {
        let to = self.core.now.after(secs);
        self.advance(to)
    }

    /// Fires every event due at or before `to`, integrating VM CPU time
    /// piecewise between them.
    pub fn advance(&mut self, to: SimTime) -> Result<usize, SimError> {
        if to < self.core.now {
            return Err(SimError::TimeReversal { now: self.core.now, to });
        }
        let mut fired = 0;
        loop {
            let Some((&(at, seq), _)) = self.core.queue.iter().next() else { break };
            if at > to {
                break;
            }
            let event = self.core.queue.remove(&(at, seq)).expect("peeked");
            self.move_clock(at);
            self.fire(event);
            fired += 1;
        }
        self.move_clock(to);
        Ok(fired)
    }

    /// Time of the next pending event, if any.
    pub fn next_event_at(&self) -> Option<SimTime> {
        self.core.queue.keys().next().map(|(t, _)| *t)
    }

    fn move_clock(&mut self, to: SimTime) {
        let dt = to.secs_since(self.core.now);
        self.core.hosts.integrate(dt);
        self.core.now = to;
    }

    fn fire(&mut self, event: Event) {
        match event {
            Event::Deliver(env) => self.deliver(env),
            Event::Timer { endpoint, epoch, tag } => {
                let live = self.services.get(&endpoint).is_some_and(|s| !s.crashed && s.epoch == epoch);
                if live {
                    self.dispatch(&endpoint, |svc, ctx| svc.on_timer(ctx, &tag));
                }
            }
            Event::VmReady { vm_id } => {
                self.core.hosts.mark_ready(&vm_id);
                self.core.flush_host_events();
            }
            Event::Fault(fault) => self.apply_fault(fault),
        }
    }

    fn deliver(&mut self, env: Envelope) {
        let reachable = self.services.get(&env.recipient).is_some_and(|s| !s.crashed);
        if reachable {
            let recipient = env.recipient.clone();
            self.dispatch(&recipient, |svc, ctx| svc.on_message(ctx, &env));
            return;
        }
        let sender_known = self.services.contains_key(&env.sender);
        if env.msg_type != "net.undeliverable" && sender_known {
            let notice = self.core.new_envelope(
                NET_ENDPOINT,
                &env.sender,
                "net.undeliverable",
                json!({"msg_type": env.msg_type, "recipient": env.recipient}),
                Some(env.request_id.clone()),
            );
            self.core.post(notice);
        } else {
            self.core.record("sim.lost", json!({"request_id": env.request_id, "recipient": env.recipient}));
        }
    }

    fn apply_fault(&mut self, fault: Fault) {
        match fault {
            Fault::VmKill { vm_id } => {
                self.core.record("sim.fault", json!({"kind": "vm_kill", "target": vm_id}));
                if self.core.hosts.kill(&vm_id).is_err() {
                    self.core.record("sim.fault_missed", json!({"target": vm_id}));
                }
                self.core.flush_host_events();
            }
            Fault::MessageDrop(rule) => {
                self.core.record("sim.fault", json!({"kind": "message_drop", "target": rule.msg_type, "count": rule.remaining}));
                self.core.drops.push(rule);
            }
            Fault::ServiceCrash { endpoint } => {
                self.core.record("sim.fault", json!({"kind": "service_crash", "target": endpoint}));
                if let Some(slot) = self.services.get_mut(&endpoint) {
                    slot.crashed = true;
                    slot.epoch += 1;
                    self.core.epochs.insert(endpoint.clone(), slot.epoch);
                }
            }
            Fault::ServiceRestart { endpoint } => {
                let was_down = self.services.get(&endpoint).is_some_and(|s| s.crashed);
                if !was_down {
                    return;
                }
                self.core.record("sim.restart", json!({"target": endpoint}));
                if let Some(slot) = self.services.get_mut(&endpoint) {
                    slot.crashed = false;
                    slot.epoch += 1;
                    self.core.epochs.insert(endpoint.clone(), slot.epoch);
                }
                self.dispatch(&endpoint, |svc, ctx| svc.on_restart(ctx));
            }
        }
    }

    /// Convenience for `inject_fault(ServiceRestart)` at the current instant.
    pub fn restart(&mut self, endpoint: &str) -> Result<(), SimError> {
        self.inject_fault(Fault::ServiceRestart { endpoint: endpoint.to_string() }, self.core.now)
    }

    fn dispatch(&mut self, endpoint: &str, f: impl FnOnce(&mut dyn Service, &mut dyn Context)) {
        let Some(slot) = self.services.get_mut(endpoint) else { return };
        let Some(mut service) = slot.service.take() else { return };
        {
            let mut ctx = Ctx { core: &mut self.core, me: endpoint };
            f(service.as_mut(), &mut ctx);
        }
        if let Some(slot) = self.services.get_mut(endpoint) {
            slot.service = Some(service);
        }
        self.core.flush_host_events();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::HostCapacity;
    use crate::simnet::host::{RatePolicy, VmSpec};
    use crate::simnet::service::Mailbox;
    use std::any::Any;

    /// Replies to every request with an `.ok` and counts timer firings.
    #[derive(Default)]
    struct Echo {
        timers: Vec<SimTime>,
    }

    impl Service for Echo {
        fn on_message(&mut self, ctx: &mut dyn Context, msg: &Envelope) {
            if !msg.is_ok_reply() {
                ctx.reply_ok(msg, msg.body.clone());
            }
        }
        fn on_timer(&mut self, ctx: &mut dyn Context, _tag: &Value) {
            self.timers.push(ctx.now());
        }
        fn as_any(&self) -> &dyn Any {
            self
        }
    }

    fn world() -> World {
        let mut w = World::new(7);
        w.spawn("echo", Box::new(Echo::default())).unwrap();
        w.spawn("me", Box::new(Mailbox::default())).unwrap();
        w
    }

    fn mailbox(w: &World) -> &Mailbox {
        w.service::<Mailbox>("me").unwrap()
    }

    #[test]
    fn single_delivery_after_latency() {
        let mut w = world();
        w.send("me", "echo", "ping", json!({}));
        w.advance(SimTime::from_secs(0.005)).unwrap();
        assert!(mailbox(&w).received.is_empty());
        w.advance(SimTime::from_secs(0.02)).unwrap();
        let got = &mailbox(&w).received;
        assert_eq!(got.len(), 1);
        // request reached echo at 0.01, reply left then
        assert_eq!(got[0].sent_at, SimTime::from_secs(0.01));
    }

    #[test]
    fn same_instant_sends_keep_order() {
        let mut w = world();
        let a = w.send("me", "echo", "ping", json!({"n": 1}));
        let b = w.send("me", "echo", "ping", json!({"n": 2}));
        w.advance(SimTime::from_secs(1.0)).unwrap();
        let ids: Vec<_> = mailbox(&w).received.iter().map(|e| e.request_id.clone()).collect();
        assert_eq!(ids, vec![a, b]);
    }

    #[test]
    fn unknown_recipient_bounces() {
        let mut w = world();
        let id = w.send("me", "nobody", "ping", json!({}));
        w.advance(SimTime::from_secs(1.0)).unwrap();
        let notice = mailbox(&w).reply_to(&id).unwrap();
        assert_eq!(notice.msg_type, "net.undeliverable");
        assert_eq!(notice.sender, NET_ENDPOINT);
    }

    #[test]
    fn advance_to_now_is_a_no_op_and_backwards_fails() {
        let mut w = world();
        w.advance(SimTime::from_secs(2.0)).unwrap();
        let log_len = w.log().len();
        assert_eq!(w.advance(SimTime::from_secs(2.0)).unwrap(), 0);
        assert_eq!(w.log().len(), log_len);
        assert!(matches!(w.advance(SimTime::from_secs(1.0)), Err(SimError::TimeReversal { .. })));
    }

    #[test]
    fn piecewise_integration() {
        let mut w = World::new(0);
        w.add_host(SimHost::new("h", HostCapacity::new(1.0, 1024).unwrap(), 1024, RatePolicy::Market));
        w.hosts_mut().create_vm("h", "v", VmSpec::default(), "x").unwrap();
        w.hosts_mut().start_boot("v", SimTime::ZERO, 0.0).unwrap();
        w.hosts_mut().mark_ready("v");
        w.hosts_mut().set_rates("h", &BTreeMap::from([("v".into(), 1.0)])).unwrap();
        w.advance(SimTime::from_secs(50.0)).unwrap();
        w.hosts_mut().set_rates("h", &BTreeMap::from([("v".into(), 0.5)])).unwrap();
        w.advance(SimTime::from_secs(100.0)).unwrap();
        let acc = w.hosts().find_vm("v").unwrap().accumulated_cpu_seconds;
        assert!((acc - 75.0).abs() < 1e-9);
    }

    #[test]
    fn message_drop_discards_next_match_only() {
        let mut w = world();
        w.inject_fault(Fault::MessageDrop(DropRule::next("ping")), SimTime::ZERO).unwrap();
        w.send("me", "echo", "ping", json!({"n": 1}));
        w.send("me", "echo", "ping", json!({"n": 2}));
        w.advance(SimTime::from_secs(1.0)).unwrap();
        let got = &mailbox(&w).received;
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].body["n"], 2);
    }

    #[test]
    fn crash_bounces_and_drops_timers_until_restart() {
        let mut w = world();
        w.dispatch("echo", |_, ctx| ctx.set_timer(SimTime::from_secs(5.0), json!("t")));
        w.inject_fault(Fault::ServiceCrash { endpoint: "echo".into() }, SimTime::from_secs(1.0)).unwrap();
        w.advance(SimTime::from_secs(2.0)).unwrap();
        let id = w.send("me", "echo", "ping", json!({}));
        w.advance(SimTime::from_secs(6.0)).unwrap();
        assert_eq!(mailbox(&w).reply_to(&id).unwrap().msg_type, "net.undeliverable");
        assert!(w.service::<Echo>("echo").unwrap().timers.is_empty());
        w.restart("echo").unwrap();
        let id = w.send("me", "echo", "ping", json!({}));
        w.advance(SimTime::from_secs(7.0)).unwrap();
        assert_eq!(mailbox(&w).reply_to(&id).unwrap().msg_type, "ping.ok");
    }

    #[test]
    fn fault_targets_are_checked() {
        let mut w = world();
        assert!(matches!(
            w.inject_fault(Fault::VmKill { vm_id: "ghost".into() }, SimTime::ZERO),
            Err(SimError::UnknownTarget(_))
        ));
        assert!(w.inject_fault(Fault::ServiceCrash { endpoint: "nope".into() }, SimTime::ZERO).is_err());
        w.advance(SimTime::from_secs(1.0)).unwrap();
        assert!(matches!(
            w.inject_fault(Fault::ServiceCrash { endpoint: "echo".into() }, SimTime::ZERO),
            Err(SimError::FaultInPast { .. })
        ));
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let run = || {
            let mut w = world();
            w.net_mut().jitter = 0.005;
            for n in 0..5 {
                w.send("me", "echo", "ping", json!({"n": n}));
            }
            w.advance(SimTime::from_secs(1.0)).unwrap();
            w.log().to_vec()
        };
        assert_eq!(run(), run());
    }
}
