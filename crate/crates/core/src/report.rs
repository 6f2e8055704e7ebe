//! Run reports, recomputed from a message log alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::simnet::Envelope;
use crate::time::SimTime;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("log line {line}: {message}")]
pub struct LogError {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub line: usize,
    pub probe: String,
    pub expected: String,
    pub actual: String,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharePoint {
    pub at: SimTime,
    pub shares: BTreeMap<String, f64>,
    pub price: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub scenario: Option<String>,
    pub seed: Option<u64>,
    pub end: SimTime,
    pub shares: BTreeMap<String, Vec<SharePoint>>,
    pub balances: BTreeMap<String, Vec<(SimTime, String)>>,
    pub cpu: BTreeMap<String, f64>,
    pub assertions: Vec<AssertionResult>,
    pub lifecycle: Vec<String>,
}

/// Parses a message log, one canonical envelope per line.
pub fn parse_log(text: &str) -> Result<Vec<Envelope>, LogError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| Envelope::parse_line(l).map_err(|e| LogError { line: i + 1, message: e.to_string() }))
        .collect()
}

#[derive(Default)]
struct VmClock {
    running: bool,
    rate: f64,
    since: SimTime,
    total: f64,
}

impl VmClock {
    fn advance(&mut self, to: SimTime) {
        if self.running {
            self.total += self.rate * to.secs_since(self.since);
        }
        self.since = to;
    }
}

impl RunReport {
    pub fn from_log(envelopes: &[Envelope]) -> RunReport {
        let mut r = RunReport::default();
        let mut clocks: BTreeMap<String, VmClock> = BTreeMap::new();
        for env in envelopes {
            r.end = r.end.max(env.sent_at);
            let b = &env.body;
            match (env.sender.as_str(), env.msg_type.as_str()) {
                ("sim", "sim.meta") => {
                    r.scenario = b.get("scenario").and_then(Value::as_str).map(str::to_string);
                    r.seed = b.get("seed").and_then(Value::as_u64);
                }
                ("sim", "auc.shares") => {
                    let host = b.get("host").and_then(Value::as_str).unwrap_or_default().to_string();
                    let shares = b
                        .get("shares")
                        .and_then(Value::as_object)
                        .map(|m| m.iter().filter_map(|(k, v)| v.as_f64().map(|x| (k.clone(), x))).collect())
                        .unwrap_or_default();
                    let price = b.get("price").and_then(Value::as_f64).unwrap_or(0.0);
                    r.shares.entry(host).or_default().push(SharePoint { at: env.sent_at, shares, price });
                }
                ("sim", "sim.vm") => {
                    let vm = b.get("vm").and_then(Value::as_str).unwrap_or_default().to_string();
                    let c = clocks.entry(vm).or_insert_with(|| VmClock { since: env.sent_at, ..Default::default() });
                    c.advance(env.sent_at);
                    c.running = b.get("state").and_then(Value::as_str).is_some_and(|s| s.eq_ignore_ascii_case("running"));
                    c.rate = b.get("cpu_rate").and_then(Value::as_f64).unwrap_or(0.0);
                }
                ("sim", "scenario.assert") => {
                    if let Ok(a) = serde_json::from_value::<AssertionResult>(b.clone()) {
                        r.assertions.push(a);
                    }
                }
                ("sim", "lc.running") => r.lifecycle.push(format!("{} {} running", env.sent_at, str_of(b, "deployment"))),
                ("sim", "lc.vm_death") => {
                    r.lifecycle.push(format!("{} {} vm death at {}", env.sent_at, str_of(b, "deployment"), str_of(b, "node")))
                }
                ("sim", "lc.restore") => r.lifecycle.push(format!(
                    "{} {} {} restored={}",
                    env.sent_at,
                    str_of(b, "deployment"),
                    str_of(b, "host"),
                    b.get("restored").and_then(Value::as_bool).unwrap_or(false)
                )),
                ("sim", "lc.done") => r.lifecycle.push(format!(
                    "{} {} done failed={}",
                    env.sent_at,
                    str_of(b, "deployment"),
                    b.get("failed").and_then(Value::as_bool).unwrap_or(false)
                )),
                (_, "bank.open.ok" | "bank.settle.ok") => {
                    if let Some(m) = b.get("balances").and_then(Value::as_object) {
                        for (acct, bal) in m {
                            if let Some(s) = bal.as_str() {
                                r.balances.entry(acct.clone()).or_default().push((env.sent_at, s.to_string()));
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        for (vm, mut c) in clocks {
            c.advance(r.end);
            r.cpu.insert(vm, c.total);
        }
        r
    }

    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.pass)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario: {}", self.scenario.as_deref().unwrap_or("-"));
        let _ = writeln!(out, "seed: {}", self.seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into()));
        let _ = writeln!(out, "end: {}", self.end);
        if !self.shares.is_empty() {
            out.push_str("\nshares:\n");
            for (host, points) in &self.shares {
                for p in points {
                    let s: Vec<String> = p.shares.iter().map(|(b, x)| format!("{b}={x:.6}")).collect();
                    let _ = writeln!(out, "  {host} {} price={:.6} {}", p.at, p.price, s.join(" "));
                }
            }
        }
        if !self.balances.is_empty() {
            out.push_str("\nbalances:\n");
            for (acct, points) in &self.balances {
                let s: Vec<String> = points.iter().map(|(t, b)| format!("{t}:{b}")).collect();
                let _ = writeln!(out, "  {acct} {}", s.join(" "));
            }
        }
        if !self.cpu.is_empty() {
            out.push_str("\ncpu seconds:\n");
            for (vm, secs) in &self.cpu {
                let _ = writeln!(out, "  {vm} {secs:.6}");
            }
        }
        if !self.lifecycle.is_empty() {
            out.push_str("\nlifecycle:\n");
            for l in &self.lifecycle {
                let _ = writeln!(out, "  {l}");
            }
        }
        if !self.assertions.is_empty() {
            out.push_str("\nassertions:\n");
            for a in &self.assertions {
                if a.pass {
                    let _ = writeln!(out, "  PASS line {}: {} == {}", a.line, a.probe, a.expected);
                } else {
                    let _ = writeln!(out, "  FAIL line {}: {}", a.line, a.probe);
                    let _ = writeln!(out, "    - expected {}", a.expected);
                    let _ = writeln!(out, "    + actual   {}", a.actual);
                }
            }
            let failed = self.assertions.iter().filter(|a| !a.pass).count();
            let _ = writeln!(out, "  {} passed, {failed} failed", self.assertions.len() - failed);
        }
        out
    }
}

fn str_of<'a>(b: &'a Value, key: &str) -> &'a str {
    b.get(key).and_then(Value::as_str).unwrap_or("?")
}

/// Checks lifecycle ordering for one deployment (or all, with `None`)
/// against its log records. Deploy and start must respect the tree: a node
/// moves only after its parent and its previous sibling did. Every teardown
/// batch must terminate exactly in the announced order, and that order must
/// be the reverse of start order over the started nodes it contains.
pub fn check_lifecycle_order(envelopes: &[Envelope], deployment: Option<&str>) -> Result<(), String> {
    let mut trees: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut moves: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    let mut sweeps: BTreeMap<String, Vec<(usize, Vec<String>)>> = BTreeMap::new();
    for env in envelopes.iter().filter(|e| e.sender == "sim") {
        let dep = str_of(&env.body, "deployment").to_string();
        if deployment.is_some_and(|d| d != dep) {
            continue;
        }
        let list = |k: &str| -> Vec<String> {
            env.body.get(k).and_then(Value::as_array).map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect()).unwrap_or_default()
        };
        match env.msg_type.as_str() {
            "lc.accept" => {
                trees.insert(dep, list("nodes"));
            }
            "lc.transition" => {
                let m = moves.entry(dep).or_default();
                m.push((str_of(&env.body, "node").to_string(), str_of(&env.body, "to").to_string()));
            }
            "lc.sweep" => {
                let pos = moves.get(&dep).map_or(0, Vec::len);
                sweeps.entry(dep).or_default().push((pos, list("nodes")));
            }
            _ => {}
        }
    }
    for (dep, nodes) in &trees {
        let moves = moves.get(dep).map(Vec::as_slice).unwrap_or_default();
        let parent = |n: &str| n.rsplit_once(':').map(|(p, _)| p.to_string()).filter(|p| nodes.contains(p));
        let prev_sibling = |n: &str| {
            let p = parent(n)?;
            let sibs: Vec<&String> = nodes.iter().filter(|x| parent(x).as_deref() == Some(p.as_str())).collect();
            let i = sibs.iter().position(|x| *x == n)?;
            i.checked_sub(1).map(|j| sibs[j].clone())
        };
        for phase in ["DEPLOYED", "STARTED"] {
            let order: Vec<&String> = moves.iter().filter(|(_, to)| to == phase).map(|(n, _)| n).collect();
            for (i, n) in order.iter().enumerate() {
                for dep_on in [parent(n), prev_sibling(n)].into_iter().flatten() {
                    let earlier = order[..i].iter().any(|x| **x == dep_on);
                    let skipped_sibling = prev_sibling(n).as_deref() == Some(dep_on.as_str()) && !order.iter().any(|x| **x == dep_on);
                    if !earlier && !skipped_sibling {
                        return Err(format!("{dep}: {n} reached {phase} before {dep_on}"));
                    }
                }
            }
        }
        let started: Vec<&String> = moves.iter().filter(|(_, to)| to == "STARTED").map(|(n, _)| n).collect();
        let mut seen_terminated = BTreeSet::new();
        for (pos, batch) in sweeps.get(dep).map(Vec::as_slice).unwrap_or_default() {
            let done: Vec<&String> = moves[*pos..]
                .iter()
                .filter(|(n, to)| to == "TERMINATED" && batch.contains(n) && seen_terminated.insert((*n).clone()))
                .map(|(n, _)| n)
                .collect();
            if done.len() != batch.len() || done.iter().zip(batch).any(|(a, b)| *a != b) {
                return Err(format!("{dep}: teardown {done:?} does not follow the announced order {batch:?}"));
            }
            let started_in_batch: Vec<&String> = batch.iter().filter(|n| started.contains(n)).collect();
            let mut expected: Vec<&String> = started.iter().copied().filter(|n| batch.contains(n)).collect();
            expected.reverse();
            if started_in_batch != expected {
                return Err(format!("{dep}: teardown {started_in_batch:?} is not the reverse of start order {expected:?}"));
            }
        }
        for (n, to) in moves {
            if to == "STARTED" && !moves.iter().any(|(m, t)| m == n && t == "DEPLOYED") {
                return Err(format!("{dep}: {n} started without deploying"));
            }
        }
    }
    Ok(())
}
