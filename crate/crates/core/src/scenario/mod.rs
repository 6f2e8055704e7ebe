//! Scripted, deterministic runs.
//!
//! ```text
//! name two_bidders
//! seed 42
//! spawn bank
//! spawn sls
//! spawn auctioneer h1 cpu=1 mem=4096 boot=0
//! open alice 1000.00
//! bid h1 a alice 600.00 200
//! advance 100.13
//! assert cpu h1/a == 75 tol=1e-3
//! ```
//!
//! Directives run in order against one [`World`]. `at <t> <directive>`
//! schedules a directive for a later `advance` to fire. Assertions probe the
//! live world and are written to the log, so the report can be rebuilt from
//! the log alone.

mod parse;
mod probe;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

pub use parse::{parse, Directive, FaultSpec, Line, ParseError, ServiceKind, Time};
pub use probe::probe;

use crate::auctioneer::{auctioneer_endpoint, AuctioneerService};
use crate::bank::{BankService, BANK_ENDPOINT, DEFAULT_RESERVE_SUPPLY};
use crate::bidder::{BidMode, BidPolicy, BidderAgent};
use crate::directory::{DirectoryService, DEFAULT_LIVENESS_WINDOW, DIRECTORY_ENDPOINT};
use crate::lifecycle::{LifecycleService, LIFECYCLE_ENDPOINT};
use crate::market::{Bid, Credit, HostCapacity};
use crate::report::{parse_log, AssertionResult, RunReport};
use crate::simnet::{DropRule, Fault, Mailbox, RatePolicy, SimError, SimHost, VmSpec, World};
use crate::time::SimTime;

/// Endpoint that scripted requests come from.
pub const DRIVER: &str = "driver";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("line {line}: {message}")]
    Run { line: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides the scenario's `seed`.
    pub seed: Option<u64>,
    /// Keeps the clock running to this instant after the script ends.
    pub until: Option<f64>,
    /// Where `deploy` looks for descriptor files.
    pub base_dir: Option<PathBuf>,
}

pub struct Outcome {
    pub world: World,
    pub name: String,
    pub seed: u64,
    pub report: RunReport,
    pub assertions: Vec<AssertionResult>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.pass)
    }

    pub fn log_text(&self) -> String {
        let mut s = self.world.log().join("\n");
        s.push('\n');
        s
    }

    pub fn trace_text(&self) -> String {
        self.world.trace().iter().map(|t| serde_json::to_string(t).expect("trace records serialize") + "\n").collect()
    }
}

/// Runs scenario text.
pub fn run_source(text: &str, opts: &RunOptions) -> Result<Outcome, ScenarioError> {
    let lines = parse(text)?;
    Runner::new(&lines, opts).run(&lines)
}

/// Runs a scenario file; relative descriptor paths resolve against its directory.
pub fn run_file(path: &Path, opts: &RunOptions) -> Result<Outcome, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io { path: path.display().to_string(), message: e.to_string() })?;
    let mut opts = opts.clone();
    if opts.base_dir.is_none() {
        opts.base_dir = path.parent().map(Path::to_path_buf);
    }
    run_source(&text, &opts)
}

struct Runner {
    world: World,
    name: String,
    seed: u64,
    base_dir: PathBuf,
    until: Option<f64>,
    pending: Vec<(SimTime, usize, usize, Directive)>,
    snapshots: BTreeMap<String, String>,
    assertions: Vec<AssertionResult>,
}

fn opt<T: std::str::FromStr>(opts: &BTreeMap<String, String>, key: &str, default: T) -> Result<T, String> {
    match opts.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| format!("bad value `{v}` for `{key}`")),
    }
}

fn check_keys(opts: &BTreeMap<String, String>, allowed: &[&str]) -> Result<(), String> {
    match opts.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(format!("unknown option `{k}`; expected one of {}", allowed.join(", "))),
        None => Ok(()),
    }
}

fn spec_from(opts: &BTreeMap<String, String>) -> Result<VmSpec, String> {
    let d = VmSpec::default();
    let spec = VmSpec {
        vcpus: opt(opts, "vcpus", d.vcpus)?,
        memory: opt(opts, "memory", d.memory)?,
        image: opts.get("image").cloned().unwrap_or(d.image),
        disk: opt(opts, "disk", d.disk)?,
        swap: opt(opts, "swap", d.swap)?,
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

impl Runner {
    fn new(lines: &[Line], opts: &RunOptions) -> Runner {
        let mut name = "unnamed".to_string();
        let mut seed = 0;
        for l in lines {
            match &l.directive {
                Directive::Name(n) => name = n.clone(),
                Directive::Seed(s) => seed = *s,
                _ => {}
            }
        }
        let seed = opts.seed.unwrap_or(seed);
        Runner {
            world: World::new(seed),
            name,
            seed,
            base_dir: opts.base_dir.clone().unwrap_or_else(|| PathBuf::from(".")),
            until: opts.until,
            pending: Vec::new(),
            snapshots: BTreeMap::new(),
            assertions: Vec::new(),
        }
    }

    fn run(mut self, lines: &[Line]) -> Result<Outcome, ScenarioError> {
        self.world.spawn(DRIVER, Box::new(Mailbox::default())).expect("fresh world");
        self.world.record("sim.meta", json!({"scenario": self.name, "seed": self.seed}));
        for (i, l) in lines.iter().enumerate() {
            self.exec(l.line, i, &l.directive).map_err(|message| ScenarioError::Run { line: l.line, message })?;
        }
        if let Some(until) = self.until {
            let to = SimTime::from_secs(until);
            if to > self.world.now() {
                self.advance_to(to).map_err(|message| ScenarioError::Run { line: 0, message })?;
            }
        }
        let now = self.world.now();
        self.world.record("sim.end", json!({"at": now}));
        let log = parse_log(&(self.world.log().join("\n"))).expect("the world writes well-formed lines");
        let report = RunReport::from_log(&log);
        Ok(Outcome { world: self.world, name: self.name, seed: self.seed, report, assertions: self.assertions })
    }

    fn advance_to(&mut self, to: SimTime) -> Result<(), String> {
        loop {
            self.pending.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
            let due = self.pending.first().is_some_and(|p| p.0 <= to);
            if !due {
                break;
            }
            let (at, _, line, d) = self.pending.remove(0);
            self.world.advance(at).map_err(|e| e.to_string())?;
            self.exec(line, usize::MAX, &d).map_err(|e| format!("scheduled at line {line}: {e}"))?;
        }
        self.world.advance(to).map_err(|e| e.to_string())?;
        Ok(())
    }

    fn fault(&mut self, f: Fault) -> Result<(), String> {
        let now = self.world.now();
        self.world.inject_fault(f, now).map_err(|e: SimError| e.to_string())
    }

    fn exec(&mut self, line: usize, index: usize, d: &Directive) -> Result<(), String> {
        match d {
            Directive::Name(_) | Directive::Seed(_) => {}
            Directive::Net(o) => {
                check_keys(o, &["latency", "jitter"])?;
                let net = self.world.net_mut();
                net.default_latency = opt(o, "latency", net.default_latency)?;
                net.jitter = opt(o, "jitter", net.jitter)?;
            }
            Directive::Spawn { kind, name, opts } => self.spawn(*kind, name.as_deref(), opts)?,
            Directive::Open { account, grant } => {
                self.world.send(DRIVER, BANK_ENDPOINT, "bank.open", json!({"account": account, "grant": grant}));
            }
            Directive::Bid { host, bid_id, account, amount, duration, opts } => {
                let spec = spec_from(opts)?;
                let bid = Bid::new(bid_id.as_str(), account.as_str(), *amount, *duration, self.world.now()).map_err(|e| e.to_string())?;
                self.world.send(DRIVER, &auctioneer_endpoint(host), "auc.submit", json!({"bid": bid, "spec": spec}));
            }
            Directive::Adjust { host, bid_id, duration } => {
                self.world.send(DRIVER, &auctioneer_endpoint(host), "auc.adjust", json!({"bid_id": bid_id, "duration": duration}));
            }
            Directive::Deploy { deployment, file } => {
                let path = self.base_dir.join(file);
                let source = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                self.world.send(DRIVER, LIFECYCLE_ENDPOINT, "lc.deploy", json!({"deployment": deployment, "source": source}));
            }
            Directive::Terminate { deployment } => {
                self.world.send(DRIVER, LIFECYCLE_ENDPOINT, "lc.terminate", json!({"deployment": deployment}));
            }
            Directive::Inject(f) => {
                let fault = match f {
                    FaultSpec::VmKill(vm) => Fault::VmKill { vm_id: vm.clone() },
                    FaultSpec::Crash(ep) => Fault::ServiceCrash { endpoint: ep.clone() },
                    FaultSpec::Drop { msg_type, from, to, count } => {
                        Fault::MessageDrop(DropRule { msg_type: msg_type.clone(), from: from.clone(), to: to.clone(), remaining: *count })
                    }
                };
                self.fault(fault)?;
            }
            Directive::Restart(ep) => self.fault(Fault::ServiceRestart { endpoint: ep.clone() })?,
            Directive::Link { from, to, latency } => self.world.net_mut().set_link(from, to, *latency),
            Directive::At { at, directive } => {
                let at = SimTime::from_secs(*at);
                if at < self.world.now() {
                    return Err(format!("`at {at}` is in the past (now {})", self.world.now()));
                }
                self.pending.push((at, index, line, (**directive).clone()));
            }
            Directive::Advance(t) => {
                let to = match t {
                    Time::At(t) => SimTime::from_secs(*t),
                    Time::After(dt) => self.world.now().after(*dt),
                };
                if to < self.world.now() {
                    return Err(format!("cannot advance back to {to} (now {})", self.world.now()));
                }
                self.advance_to(to)?;
            }
            Directive::Assert { probe: words, expected, tol } => {
                let actual = probe(&self.world, &self.snapshots, words).unwrap_or_else(|e| format!("<error: {e}>"));
                let pass = compare(&actual, expected, tol.unwrap_or(1e-9));
                let shown = match tol {
                    Some(t) => format!("{expected} (tol {t})"),
                    None => expected.clone(),
                };
                let result = AssertionResult { line, probe: words.join(" "), expected: shown, actual, pass };
                self.world.record("scenario.assert", serde_json::to_value(&result).expect("plain struct"));
                self.assertions.push(result);
            }
        }
        Ok(())
    }

    fn add_host(&mut self, id: &str, o: &BTreeMap<String, String>, policy: RatePolicy) -> Result<(), String> {
        if self.world.hosts().contains(id) {
            return Ok(());
        }
        let capacity = HostCapacity::new(opt(o, "cpu", 1.0)?, opt(o, "mem", 4096)?).map_err(|e| e.to_string())?;
        let host = SimHost::new(id, capacity, opt(o, "disk", 100_000)?, policy).with_boot_delay(opt(o, "boot", 5.0)?);
        self.world.add_host(host);
        let snap = self.world.hosts().ledger_snapshot(id).expect("just added");
        self.snapshots.insert(id.to_string(), snap);
        Ok(())
    }

    fn spawn(&mut self, kind: ServiceKind, name: Option<&str>, o: &BTreeMap<String, String>) -> Result<(), String> {
        const HOST_KEYS: [&str; 5] = ["cpu", "mem", "disk", "boot", "policy"];
        let name = name.unwrap_or_default();
        let (endpoint, svc): (String, Box<dyn crate::simnet::Service>) = match kind {
            ServiceKind::Bank => {
                check_keys(o, &["supply"])?;
                let supply: Credit = opt(o, "supply", DEFAULT_RESERVE_SUPPLY)?;
                (BANK_ENDPOINT.into(), Box::new(BankService::new(supply)))
            }
            ServiceKind::Directory => {
                check_keys(o, &["window"])?;
                (DIRECTORY_ENDPOINT.into(), Box::new(DirectoryService::new(opt(o, "window", DEFAULT_LIVENESS_WINDOW)?)))
            }
            ServiceKind::Lifecycle => {
                check_keys(o, &[])?;
                (LIFECYCLE_ENDPOINT.into(), Box::new(LifecycleService::new()))
            }
            ServiceKind::Host => {
                check_keys(o, &HOST_KEYS)?;
                let policy = match o.get("policy").map(String::as_str) {
                    None | Some("reserved") => RatePolicy::Reserved,
                    Some("market") => RatePolicy::Market,
                    Some(p) => return Err(format!("unknown policy `{p}`")),
                };
                return self.add_host(name, o, policy);
            }
            ServiceKind::Auctioneer => {
                let mut keys = HOST_KEYS.to_vec();
                keys.push("heartbeat");
                check_keys(o, &keys)?;
                self.add_host(name, o, RatePolicy::Market)?;
                let mut svc = AuctioneerService::new(name);
                if o.contains_key("heartbeat") {
                    svc = svc.with_heartbeat_interval(opt(o, "heartbeat", 10.0)?);
                }
                (auctioneer_endpoint(name), Box::new(svc))
            }
            ServiceKind::Bidder => {
                check_keys(o, &["target", "budget", "duration", "check", "mode", "bid", "vcpus", "memory", "image", "disk", "swap"])?;
                let policy = BidPolicy {
                    target_share: opt(o, "target", 0.5)?,
                    budget: opt(o, "budget", Credit::from_units(100))?,
                    planned_duration: opt(o, "duration", 100.0)?,
                    check_interval: opt(o, "check", 1.0)?,
                };
                policy.validate().map_err(|e| e.to_string())?;
                let mode = match o.get("mode").map(String::as_str) {
                    None | Some("auto") => BidMode::Auto,
                    Some("once") => BidMode::Once,
                    Some(m) => return Err(format!("unknown bidder mode `{m}`")),
                };
                let mut agent = BidderAgent::new(name, policy, spec_from(o)?, mode);
                if let Some(b) = o.get("bid") {
                    agent = agent.with_bid_id(b.as_str());
                }
                (format!("bidder/{name}"), Box::new(agent))
            }
        };
        self.world.spawn(&endpoint, svc).map_err(|e| e.to_string())
    }
}

/// Numbers compare within `tol`; anything else compares as text.
pub fn compare(actual: &str, expected: &str, tol: f64) -> bool {
    match (actual.parse::<f64>(), expected.parse::<f64>()) {
        (Ok(a), Ok(e)) => (a - e).abs() <= tol,
        _ => actual == expected,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = "
name two
seed 42
spawn bank
spawn sls
spawn auctioneer h1 cpu=1 mem=4096 boot=0
open alice 1000.00
open bob 1000.00
advance 0.1
bid h1 a alice 600.00 200
bid h1 b bob 200.00 200
advance 0.2
assert share h1 a == 0.75
advance 100.13
assert cpu h1/a == 75 tol=1e-3
assert cpu h1/b == 25 tol=1e-3
assert msgs bank.settle == 2
assert balance alice == 400.00
assert bank.total == 1000000.00
";

    #[test]
    fn proportional_scenario() {
        let out = run_source(TWO, &RunOptions::default()).unwrap();
        for a in &out.assertions {
            assert!(a.pass, "{a:?}");
        }
        assert_eq!(out.assertions.len(), 6);
        assert_eq!(out.report.assertions, out.assertions);
        assert!((out.report.cpu["h1/a"] - 75.0).abs() < 1e-3, "{:?}\n{}", out.report.cpu, out.log_text());
    }

    #[test]
    fn failing_assertion_is_reported_with_both_values() {
        let out = run_source("spawn bank\nopen a 5.00\nadvance 1\nassert balance a == 6.00\n", &RunOptions::default()).unwrap();
        assert!(!out.passed());
        let text = out.report.render();
        assert!(text.contains("- expected 6.00") && text.contains("+ actual   5.00"), "{text}");
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = run_source(TWO, &RunOptions::default()).unwrap();
        let b = run_source(TWO, &RunOptions::default()).unwrap();
        assert_eq!(a.log_text(), b.log_text());
        assert_eq!(a.report.render(), b.report.render());
    }

    #[test]
    fn scheduled_directives_fire_in_time() {
        let src = "spawn auctioneer h1 boot=0\nspawn bank\nspawn sls\nopen x 10.00\nadvance 0.1\nbid h1 a x 10.00 100\n\
                   at 20 inject vm_kill h1/a\nadvance 19\nassert vm.state h1/a == RUNNING\nadvance 21\nassert vm.state h1/a == DEAD\n";
        let out = run_source(src, &RunOptions::default()).unwrap();
        for a in &out.assertions {
            assert!(a.pass, "{a:?}");
        }
    }

    #[test]
    fn bad_directive_stops_the_run_with_its_line() {
        let Err(e) = run_source("spawn bank\nadvance 5\nadvance 1\n", &RunOptions::default()) else { panic!("ran") };
        assert!(matches!(e, ScenarioError::Run { line: 3, .. }), "{e}");
    }
}
