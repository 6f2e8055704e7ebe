use std::any::Any;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::simnet::envelope::Envelope;
use crate::simnet::host::{HostError, HostTable};
use crate::time::SimTime;

/// A lifecycle transition, one line of the event trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub at: SimTime,
    pub deployment: String,
    pub node: String,
    pub from: String,
    pub to: String,
}

/// What a service can do while handling an event. Implemented by the
/// deterministic [`World`](crate::simnet::World) and by the wall-clock daemon runtime.
pub trait Context {
    fn now(&self) -> SimTime;

    /// Endpoint of the service being called.
    fn me(&self) -> &str;

    /// Sends a new request and returns its request id.
    fn send(&mut self, to: &str, msg_type: &str, body: Value) -> String;

    /// Answers `request` with the same request id.
    fn reply(&mut self, request: &Envelope, msg_type: &str, body: Value);

    fn set_timer(&mut self, at: SimTime, tag: Value);

    /// Direct access to the local hypervisors.
    fn hosts(&mut self) -> &mut HostTable;

    /// Starts booting a provisioned VM; the runtime flips it to RUNNING after `delay` seconds.
    fn boot_vm(&mut self, vm_id: &str, delay: f64) -> Result<SimTime, HostError>;

    /// Appends an observation to the message log.
    fn record(&mut self, kind: &str, body: Value);

    fn trace(&mut self, record: TraceRecord);

    fn rng(&mut self) -> &mut ChaCha8Rng;

    fn reply_ok(&mut self, request: &Envelope, body: Value) {
        let ty = format!("{}.ok", request.msg_type);
        self.reply(request, &ty, body);
    }

    fn reply_err(&mut self, request: &Envelope, code: &str, message: &str) {
        let ty = format!("{}.err", request.msg_type);
        self.reply(request, &ty, json!({"code": code, "message": message}));
    }
}

/// A bus participant. Services only see the world through [`Context`].
pub trait Service: Any {
    fn on_start(&mut self, _ctx: &mut dyn Context) {}

    fn on_message(&mut self, ctx: &mut dyn Context, msg: &Envelope);

    fn on_timer(&mut self, _ctx: &mut dyn Context, _tag: &Value) {}

    /// Called when a crashed service is brought back. Pending timers were
    /// discarded by the crash.
    fn on_restart(&mut self, ctx: &mut dyn Context) {
        self.on_start(ctx);
    }

    fn as_any(&self) -> &dyn Any;
}

/// Error body carried by `*.err` replies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

/// Collects every envelope delivered to it. Used as the scenario driver's
/// mailbox and in tests.
#[derive(Debug, Default)]
pub struct Mailbox {
    pub received: Vec<Envelope>,
}

impl Mailbox {
    pub fn last_of(&self, msg_type: &str) -> Option<&Envelope> {
        self.received.iter().rev().find(|e| e.msg_type == msg_type)
    }

    pub fn reply_to(&self, request_id: &str) -> Option<&Envelope> {
        self.received.iter().rev().find(|e| e.request_id == request_id)
    }
}

impl Service for Mailbox {
    fn on_message(&mut self, _ctx: &mut dyn Context, msg: &Envelope) {
        self.received.push(msg.clone());
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
