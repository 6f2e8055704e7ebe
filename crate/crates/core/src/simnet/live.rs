//! Wall-clock runtime for a single service.
//!
//! Envelopes arrive as newline-delimited canonical JSON on an input stream
//! and everything the service emits (messages and observation records) goes
//! out the same way. Routing between processes is left to whatever connects
//! the streams.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::simnet::envelope::{Envelope, ENVELOPE_VERSION};
use crate::simnet::host::{HostError, HostEvent, HostTable};
use crate::simnet::service::{Context, Service, TraceRecord};
use crate::time::SimTime;

enum Due {
    Timer(Value),
    Boot(String),
}

struct State<W: Write> {
    me: String,
    started: Instant,
    hosts: HostTable,
    due: BTreeMap<(SimTime, u64), Due>,
    seq: u64,
    next_request: u64,
    next_record: u64,
    rng: ChaCha8Rng,
    out: W,
    /// Messages the service sent to itself.
    loopback: Vec<Envelope>,
}

impl<W: Write> State<W> {
    fn emit(&mut self, env: &Envelope) {
        if let Err(e) = writeln!(self.out, "{}", env.canonical()).and_then(|()| self.out.flush()) {
            log::error!("cannot write envelope: {e}");
        }
    }

    fn envelope(&mut self, to: &str, msg_type: &str, body: Value, request_id: Option<String>) -> Envelope {
        let request_id = request_id.unwrap_or_else(|| {
            self.next_request += 1;
            format!("{}-r{}", self.me, self.next_request)
        });
        Envelope {
            version: ENVELOPE_VERSION,
            msg_type: msg_type.into(),
            request_id,
            sender: self.me.clone(),
            recipient: to.into(),
            body,
            sent_at: self.clock(),
        }
    }

    fn clock(&self) -> SimTime {
        SimTime::from_secs(self.started.elapsed().as_secs_f64())
    }

    fn post(&mut self, env: Envelope) {
        self.emit(&env);
        if env.recipient == self.me {
            self.loopback.push(env);
        }
    }

    fn flush_host_events(&mut self) {
        for event in self.hosts.drain_events() {
            match event {
                HostEvent::Changed { host_id, vm_id, state, cpu_rate } => {
                    Context::record(self, "sim.vm", json!({"host": host_id, "vm": vm_id, "state": state, "cpu_rate": cpu_rate}));
                }
                HostEvent::Gone { host_id, vm_id, owner, reason } => {
                    let mut env = self.envelope(&owner, "host.vm_gone", json!({"host": host_id, "vm_id": vm_id, "reason": reason}), None);
                    env.sender = format!("host/{host_id}");
                    self.post(env);
                }
            }
        }
    }
}

impl<W: Write> Context for State<W> {
    fn now(&self) -> SimTime {
        self.clock()
    }

    fn me(&self) -> &str {
        &self.me
    }

    fn send(&mut self, to: &str, msg_type: &str, body: Value) -> String {
        let env = self.envelope(to, msg_type, body, None);
        let id = env.request_id.clone();
        self.post(env);
        id
    }

    fn reply(&mut self, request: &Envelope, msg_type: &str, body: Value) {
        let env = self.envelope(&request.sender, msg_type, body, Some(request.request_id.clone()));
        self.post(env);
    }

    fn set_timer(&mut self, at: SimTime, tag: Value) {
        self.seq += 1;
        self.due.insert((at, self.seq), Due::Timer(tag));
    }

    fn hosts(&mut self) -> &mut HostTable {
        &mut self.hosts
    }

    fn boot_vm(&mut self, vm_id: &str, delay: f64) -> Result<SimTime, HostError> {
        let now = self.clock();
        let ready = self.hosts.start_boot(vm_id, now, delay)?;
        self.seq += 1;
        self.due.insert((ready, self.seq), Due::Boot(vm_id.to_string()));
        Ok(ready)
    }

    fn record(&mut self, kind: &str, body: Value) {
        self.next_record += 1;
        let env = Envelope {
            version: ENVELOPE_VERSION,
            msg_type: kind.into(),
            request_id: format!("{}-o{}", self.me, self.next_record),
            sender: "sim".into(),
            recipient: "log".into(),
            body,
            sent_at: self.clock(),
        };
        self.emit(&env);
    }

    fn trace(&mut self, record: TraceRecord) {
        let body = serde_json::to_value(&record).expect("trace records serialize");
        Context::record(self, "lc.trace", body);
    }

    fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Runs `service` as `endpoint` until `input` closes.
pub fn run<R, W>(endpoint: &str, mut service: Box<dyn Service>, hosts: HostTable, seed: u64, input: R, out: W) -> io::Result<()>
where
    R: BufRead + Send + 'static,
    W: Write,
{
    let (tx, rx) = mpsc::channel::<io::Result<String>>();
    thread::spawn(move || {
        for line in input.lines() {
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    let mut st = State {
        me: endpoint.to_string(),
        started: Instant::now(),
        hosts,
        due: BTreeMap::new(),
        seq: 0,
        next_request: 0,
        next_record: 0,
        rng: ChaCha8Rng::seed_from_u64(seed),
        out,
        loopback: Vec::new(),
    };
    service.on_start(&mut st);
    st.flush_host_events();
    loop {
        while !st.loopback.is_empty() {
            for env in std::mem::take(&mut st.loopback) {
                service.on_message(&mut st, &env);
                st.flush_host_events();
            }
        }
        let now = st.clock();
        if let Some((&key, _)) = st.due.iter().next() {
            if key.0 <= now {
                match st.due.remove(&key).expect("peeked") {
                    Due::Timer(tag) => service.on_timer(&mut st, &tag),
                    Due::Boot(vm) => {
                        st.hosts.mark_ready(&vm);
                    }
                }
                st.flush_host_events();
                continue;
            }
        }
        let wait = st.due.keys().next().map(|(at, _)| Duration::from_secs_f64(at.secs_since(now).max(0.0)));
        let got = match wait {
            Some(w) => rx.recv_timeout(w),
            None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
        };
        match got {
            Ok(line) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match Envelope::parse_line(&line) {
                    Ok(env) if env.recipient == st.me => {
                        service.on_message(&mut st, &env);
                        st.flush_host_events();
                    }
                    Ok(env) => log::debug!("ignoring envelope for {}", env.recipient),
                    Err(e) => log::warn!("ignoring malformed input line: {e}"),
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => return Ok(()),
        }
    }
}
