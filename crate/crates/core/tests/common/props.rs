//! Randomized suites shared by the property tests and the acceptance run.
//! Each returns `Err` with the shrunk counterexample instead of panicking.

use std::collections::BTreeMap;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRng, TestRunner};
use serde_json::json;

use agora::auctioneer::{AuctionStatus, BidStatus};
use agora::bank::Bank;
use agora::bidder::{best_response_step, Action, BidPolicy};
use agora::directory::{Directory, HostRecord};
use agora::lifecycle::{transition_allowed, LifecycleService, NodeState, Phase, LIFECYCLE_ENDPOINT};
use agora::market::{compute_shares, host_price, required_rate_for_share};
use agora::report::{check_lifecycle_order, parse_log};
use agora::simnet::{Fault, Mailbox, RatePolicy, SimHost, VmState, World};
use agora::{Bid, BidId, Credit, HostCapacity, SimTime};

pub fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    let rng = TestRng::deterministic_rng(config.rng_algorithm);
    TestRunner::new_with_rng(config, rng).run(&strategy, test).map_err(|e| e.to_string())
}

fn bid(i: usize, cents: u64, duration: f64) -> Bid {
    Bid::new(format!("b{i:02}"), format!("u{i}"), Credit::from_cents(cents), duration, SimTime::ZERO).unwrap()
}

fn bids_strategy() -> impl Strategy<Value = Vec<(u64, f64)>> {
    prop::collection::vec((1u64..100_000_000, 0.5f64..1000.0), 1..=20)
}

/// Shares sum to one, grow with the bidder's own rate while every other
/// share shrinks, and ignore a common scaling of all rates.
pub fn share_law(cases: u32) -> Result<(), String> {
    let strategy = (bids_strategy(), any::<prop::sample::Index>(), 1u64..1_000_000, 0.001f64..1000.0);
    run(cases, strategy, |(raw, pick, extra, scale)| {
        let bids: Vec<Bid> = raw.iter().enumerate().map(|(i, &(c, d))| bid(i, c, d)).collect();
        let shares = compute_shares(&bids).unwrap();
        prop_assert!((shares.total() - 1.0).abs() <= 1e-9, "sum {}", shares.total());

        let i = pick.index(bids.len());
        let mut raised = bids.clone();
        raised[i] = bid(i, raw[i].0 + extra, raw[i].1);
        let after = compute_shares(&raised).unwrap();
        for b in &bids {
            let (old, new) = (shares.get(&b.bid_id).unwrap(), after.get(&b.bid_id).unwrap());
            if bids.len() == 1 {
                prop_assert_eq!(new, 1.0);
            } else if b.bid_id == bids[i].bid_id {
                prop_assert!(new > old, "own share {old} -> {new}");
            } else {
                prop_assert!(new < old, "{} share {old} -> {new}", b.bid_id);
            }
        }

        let scaled: Vec<Bid> = raw.iter().enumerate().map(|(i, &(c, d))| bid(i, c, d / scale)).collect();
        let scaled_shares = compute_shares(&scaled).unwrap();
        for b in &bids {
            let d = shares.get(&b.bid_id).unwrap() - scaled_shares.get(&b.bid_id).unwrap();
            prop_assert!(d.abs() <= 1e-9, "scaling by {scale} moved {} by {d}", b.bid_id);
        }
        Ok(())
    })
}

/// The rate asked for a target share really obtains it, and the price is
/// additive in bids and inverse in capacity.
pub fn required_rate_and_price(cases: u32) -> Result<(), String> {
    let strategy = (0.001f64..0.999, 0.001f64..1e6, bids_strategy(), bids_strategy(), 0.1f64..64.0, 0.1f64..10.0);
    run(cases, strategy, |(target, competing, a, b, cpu, k)| {
        let need = required_rate_for_share(target, competing).unwrap().0;
        let got = need / (need + competing);
        prop_assert!((got - target).abs() <= 1e-9, "target {target} got {got}");

        let cap = HostCapacity::new(cpu, 1024).unwrap();
        let bigger = HostCapacity::new(cpu * k, 1024).unwrap();
        let left: Vec<Bid> = a.iter().enumerate().map(|(i, &(c, d))| bid(i, c, d)).collect();
        let right: Vec<Bid> = b.iter().enumerate().map(|(i, &(c, d))| bid(i + 20, c, d)).collect();
        let both: Vec<Bid> = left.iter().chain(&right).cloned().collect();
        let (pl, pr, pb) = (host_price(&left, &cap).unwrap(), host_price(&right, &cap).unwrap(), host_price(&both, &cap).unwrap());
        prop_assert!((pl + pr - pb).abs() <= 1e-9 * pb.max(1.0));
        let scaled = host_price(&both, &bigger).unwrap();
        prop_assert!((scaled * k - pb).abs() <= 1e-9 * pb.max(1.0));
        Ok(())
    })
}

#[derive(Clone, Debug)]
pub enum BankOp {
    Open { account: usize, grant: u64 },
    Settle { from: usize, to: usize, cents: u64, fault: bool },
}

fn account_name(i: usize) -> String {
    if i == 0 {
        "reserve".into()
    } else {
        format!("a{i}")
    }
}

fn bank_op() -> impl Strategy<Value = BankOp> {
    prop_oneof![
        1 => (1usize..10, 0u64..2_000_000).prop_map(|(account, grant)| BankOp::Open { account, grant }),
        3 => (0usize..10, 0usize..10, 1u64..500_000, prop::bool::weighted(0.1))
            .prop_map(|(from, to, cents, fault)| BankOp::Settle { from, to, cents, fault }),
    ]
}

/// `cases` runs of `ops` random operations each. The total across all
/// accounts never moves, a failed operation changes nothing, and replaying
/// the journal gives the same balances.
pub fn bank_conservation(cases: u32, ops: usize) -> Result<(), String> {
    run(cases, prop::collection::vec(bank_op(), ops), |ops| {
        let supply = Credit::from_cents(10_000_000);
        let mut bank = Bank::new(supply);
        for (n, op) in ops.iter().enumerate() {
            let before: Vec<_> = bank.accounts().collect();
            let journal_len = bank.journal().len();
            let at = SimTime::from_secs(n as f64);
            let result = match op {
                BankOp::Open { account, grant } => bank.open_account(&account_name(*account), Credit::from_cents(*grant), at).map(drop),
                BankOp::Settle { from, to, cents, fault } => {
                    if *fault {
                        bank.arm_fault();
                    }
                    let b = Bid::new(format!("b{n}"), account_name(*from), Credit::from_cents(*cents), 10.0, at).unwrap();
                    let r = bank.settle_bid(&b, &account_name(*to), at).map(drop);
                    if *fault && r.is_ok() {
                        return Err(TestCaseError::fail("armed fault did not fire"));
                    }
                    r
                }
            };
            prop_assert_eq!(bank.total(), supply, "after op {} {:?}", n, op);
            if result.is_err() {
                prop_assert_eq!(bank.accounts().collect::<Vec<_>>(), before, "failed op {} {:?} moved money", n, op);
                prop_assert_eq!(bank.journal().len(), journal_len);
            }
        }
        let replayed = Bank::replay(bank.journal()).unwrap();
        prop_assert_eq!(replayed.accounts().collect::<Vec<_>>(), bank.accounts().collect::<Vec<_>>());
        Ok(())
    })
}

#[derive(Clone, Debug)]
pub struct Registration {
    pub host: u32,
    pub price: f64,
    pub at_ms: u64,
}

fn registration() -> impl Strategy<Value = Registration> {
    let price = prop_oneof![prop::sample::select(vec![0.0, 0.5, 1.0, 2.0]), 0.0f64..10.0];
    (0u32..150, price, 0u64..100_000).prop_map(|(host, price, at_ms)| Registration { host, price, at_ms })
}

/// Live hosts in price order, id breaking ties, found the slow way.
pub fn brute_force_ranking(regs: &[Registration], now_ms: u64, window_ms: u64, limit: usize) -> Vec<(String, f64)> {
    let mut latest: BTreeMap<String, &Registration> = BTreeMap::new();
    for r in regs {
        latest.insert(format!("h{:03}", r.host), r);
    }
    let mut pool: Vec<(String, f64)> =
        latest.into_iter().filter(|(_, r)| now_ms - r.at_ms <= window_ms).map(|(id, r)| (id, r.price)).collect();
    let mut out = Vec::new();
    while !pool.is_empty() && out.len() < limit {
        let mut best = 0;
        for i in 1..pool.len() {
            let (a, b) = (&pool[i], &pool[best]);
            if a.1 < b.1 || (a.1 == b.1 && a.0 < b.0) {
                best = i;
            }
        }
        out.push(pool.remove(best));
    }
    out
}

/// Random directories against the brute-force ranking.
pub fn ranked_query(cases: u32) -> Result<(), String> {
    let strategy = (prop::collection::vec(registration(), 0..=100), 0u64..60_000, 1usize..=120);
    run(cases, strategy, |(regs, wait_ms, limit)| {
        let mut dir = Directory::new(30.0);
        for r in &regs {
            let rec = HostRecord {
                host_id: format!("h{:03}", r.host),
                address: format!("auc/h{:03}", r.host),
                capacity: HostCapacity::new(1.0, 1024).unwrap(),
                current_price: r.price,
                last_heartbeat: SimTime::ZERO,
                memory_free: None,
            };
            dir.register(rec, SimTime::from_micros(r.at_ms * 1000)).unwrap();
        }
        let now_ms = 100_000 + wait_ms;
        let now = SimTime::from_micros(now_ms * 1000);
        let got: Vec<(String, f64)> = dir.query_ranked(limit, now).into_iter().map(|r| (r.host_id, r.current_price)).collect();
        prop_assert_eq!(&got, &brute_force_ranking(&regs, now_ms, 30_000, limit));

        let evicted = dir.evict(now);
        let after = dir.query_ranked(usize::MAX, now);
        prop_assert!(after.iter().all(|r| !evicted.contains(&r.host_id)));
        Ok(())
    })
}

/// One generated deployment with timed VM kills and an optional early
/// terminate.
#[derive(Clone, Debug)]
pub struct FaultRun {
    pub seed: u64,
    pub source: String,
    pub kills: Vec<(f64, usize)>,
    pub terminate_at: f64,
}

#[derive(Clone, Debug)]
enum Shape {
    Pair { boot: f64, ping: f64, timeout: f64, prepare: f64 },
    Disk { prepare: f64 },
    Group(Vec<Shape>),
}

fn shape() -> impl Strategy<Value = Shape> {
    let pair = (0.0f64..12.0, prop::sample::select(vec![0.5, 1.0, 2.0, 3.0]), prop::sample::select(vec![4.0, 8.0, 60.0]), 0.0f64..3.0)
        .prop_map(|(boot, ping, timeout, prepare)| Shape::Pair { boot, ping, timeout, prepare });
    let disk = (0.0f64..3.0).prop_map(|prepare| Shape::Disk { prepare });
    let leaf = prop_oneof![3 => pair, 1 => disk];
    leaf.prop_recursive(3, 12, 3, |inner| prop::collection::vec(inner, 1..=3).prop_map(Shape::Group))
}

fn write_shape(out: &mut String, name: &str, s: &Shape, depth: usize) {
    let pad = "  ".repeat(depth);
    match s {
        Shape::Pair { boot, ping, timeout, prepare } => {
            out.push_str(&format!(
                "{pad}{name} extends Compound {{\n{pad}  disk extends StorageBackend {{ host \"n1\"; bootDelay {boot:?}; prepareDelay {prepare:?}; memory 64; disk 16; }}\n{pad}  watch extends Domain {{ pingInterval {ping:?}; bootTimeout {timeout:?}; }}\n{pad}}}\n"
            ));
        }
        Shape::Disk { prepare } => {
            out.push_str(&format!("{pad}{name} extends StorageBackend {{ host \"n1\"; prepareDelay {prepare:?}; memory 64; disk 16; }}\n"));
        }
        Shape::Group(kids) => {
            out.push_str(&format!("{pad}{name} extends Compound {{\n"));
            for (i, k) in kids.iter().enumerate() {
                write_shape(out, &format!("c{i}"), k, depth + 1);
            }
            out.push_str(&format!("{pad}}}\n"));
        }
    }
}

pub fn fault_run() -> impl Strategy<Value = FaultRun> {
    (
        any::<u64>(),
        prop::collection::vec(shape(), 1..=3),
        prop::collection::vec((0.0f64..80.0, 0usize..8), 0..=3),
        prop_oneof![10.0f64..90.0, Just(200.0)],
    )
        .prop_map(|(seed, kids, kills, terminate_at)| {
            let mut source = String::from("sfConfig extends Compound {\n");
            for (i, k) in kids.iter().enumerate() {
                write_shape(&mut source, &format!("n{i}"), k, 1);
            }
            source.push_str("}\n");
            FaultRun { seed, source, kills, terminate_at }
        })
}

/// What a fault run observed, for the caller's own checks.
pub struct FaultRunOutcome {
    pub transitions: usize,
    pub kills: usize,
    /// Deaths noticed by a watching domain, with the lag in seconds.
    pub detections: Vec<f64>,
}

/// Plays one run to the end and checks that every transition is a declared
/// edge, the order checker is satisfied, every node ends terminated or never
/// deployed, each death is seen within two ping intervals, and the host is
/// left exactly as it was.
pub fn play_fault_run(run: &FaultRun) -> Result<FaultRunOutcome, String> {
    let mut world = World::new(run.seed);
    world.add_host(SimHost::new("n1", HostCapacity::new(64.0, 1 << 20).unwrap(), 1 << 30, RatePolicy::Reserved).with_boot_delay(1.0));
    let snapshot = world.hosts().get("n1").unwrap().ledger_snapshot();
    world.spawn("driver", Box::new(Mailbox::default())).unwrap();
    world.spawn(LIFECYCLE_ENDPOINT, Box::new(LifecycleService::new())).unwrap();
    world.send("driver", LIFECYCLE_ENDPOINT, "lc.deploy", json!({"deployment": "app", "source": run.source}));

    let mut events: Vec<(f64, Option<usize>)> = run.kills.iter().map(|&(t, k)| (t, Some(k))).collect();
    events.push((run.terminate_at, None));
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut kills = 0;
    for (t, what) in events {
        world.advance(SimTime::from_secs(t)).map_err(|e| e.to_string())?;
        match what {
            Some(k) => {
                let live: Vec<String> =
                    world.hosts().get("n1").unwrap().vms().filter(|v| v.state != VmState::Dead).map(|v| v.vm_id.clone()).collect();
                if !live.is_empty() {
                    let vm_id = live[k % live.len()].clone();
                    let now = world.now();
                    world.inject_fault(Fault::VmKill { vm_id }, now).map_err(|e| e.to_string())?;
                    kills += 1;
                }
            }
            None => {
                world.send("driver", LIFECYCLE_ENDPOINT, "lc.terminate", json!({"deployment": "app"}));
            }
        }
    }
    world.advance(SimTime::from_secs(400.0)).map_err(|e| e.to_string())?;

    let envs = parse_log(&world.log().join("\n")).map_err(|e| e.to_string())?;
    let mut transitions = 0;
    let mut died_at: BTreeMap<String, f64> = BTreeMap::new();
    for e in &envs {
        match e.msg_type.as_str() {
            "lc.illegal" => return Err(format!("refused transition {}", e.body)),
            "lc.transition" => {
                let from: NodeState = serde_json::from_value(e.body["from"].clone()).map_err(|x| x.to_string())?;
                let to: NodeState = serde_json::from_value(e.body["to"].clone()).map_err(|x| x.to_string())?;
                if !transition_allowed(from, to) {
                    return Err(format!("{} went {from} -> {to}", e.body["node"]));
                }
                transitions += 1;
            }
            "sim.vm" if e.body["state"] == "DEAD" => {
                died_at.entry(e.body["vm"].as_str().unwrap_or_default().to_string()).or_insert(e.sent_at.as_secs());
            }
            _ => {}
        }
    }
    check_lifecycle_order(&envs, Some("app"))?;

    let lc: &LifecycleService = world.service(LIFECYCLE_ENDPOINT).ok_or("no lifecycle service")?;
    let dep = lc.deployment("app").ok_or("deployment missing")?;
    if dep.phase != Phase::Terminated {
        return Err(format!("deployment still {:?}", dep.phase));
    }
    for n in &dep.nodes {
        if !matches!(n.state, NodeState::Terminated | NodeState::Init) {
            return Err(format!("{} ended {}", agora::descriptor::path_string(&n.path), n.state));
        }
    }
    let mut detections = Vec::new();
    for e in envs.iter().filter(|e| e.msg_type == "lc.vm_death") {
        let vm = e.body["vm"].as_str().unwrap_or_default();
        let node = e.body["node"].as_str().unwrap_or_default();
        let ping = dep.node_by_path(node).map(|n| n.ping_interval()).ok_or("unknown node")?;
        if let Some(&death) = died_at.get(vm) {
            let lag = e.sent_at.as_secs() - death;
            detections.push(lag);
            if lag > 2.0 * ping + 1e-9 {
                return Err(format!("{vm} died at {death}, noticed {lag} s later (ping {ping})"));
            }
        }
    }
    let after = world.hosts().get("n1").unwrap().ledger_snapshot();
    if after != snapshot {
        return Err(format!("host ledger changed:\n{snapshot}\n---\n{after}"));
    }
    Ok(FaultRunOutcome { transitions, kills, detections })
}

pub fn lifecycle_fault_runs(cases: u32) -> Result<(), String> {
    run(cases, fault_run(), |r| play_fault_run(&r).map(drop).map_err(|e| TestCaseError::fail(format!("{e}\n{}", r.source))))
}

/// Against static competitors and a budget that can afford it, one step
/// reaches the band below the target, and a second step at the new share
/// does nothing.
pub fn best_response(cases: u32) -> Result<(), String> {
    let strategy = (0.05f64..0.95, prop::collection::vec(0.01f64..50.0, 1..6), 0.01f64..50.0, 0.0f64..50.0);
    run(cases, strategy, |(target, others, own_rate, elapsed)| {
        let competing: f64 = others.iter().sum();
        let need = target * competing / (1.0 - target);
        // Enough money to hold the needed rate for the rest of the run.
        let amount = Credit::ceil_from_f64(need.max(own_rate) * (elapsed + 200.0)).unwrap();
        let policy = BidPolicy { target_share: target, budget: amount, planned_duration: 200.0, check_interval: 2.0 };
        let duration = amount.as_f64() / own_rate;
        let status = |dur: f64| {
            let rate = amount.as_f64() / dur;
            let total = rate + competing;
            let mut bids = vec![row("me", amount, dur, rate, rate / total)];
            for (i, r) in others.iter().enumerate() {
                bids.push(row(&format!("o{i}"), Credit::from_units(1), 1.0 / r, *r, r / total));
            }
            AuctionStatus { host_id: "h1".into(), capacity: HostCapacity::new(1.0, 1024).unwrap(), price: total, bids }
        };
        let now = SimTime::from_secs(elapsed);
        let me = BidId::from("me");
        let new_duration = match best_response_step(&policy, &status(duration), &me, now) {
            Action::Adjust { new_duration } => new_duration,
            Action::None => duration,
            other => return Err(TestCaseError::fail(format!("unexpected {other:?}"))),
        };
        let second = status(new_duration);
        let share = second.bid(&me).unwrap().share;
        prop_assert!(share >= target - 0.01, "share {share} for target {target}");
        prop_assert_eq!(best_response_step(&policy, &second, &me, now), Action::None);
        Ok(())
    })
}

fn row(id: &str, amount: Credit, duration: f64, rate: f64, share: f64) -> BidStatus {
    BidStatus {
        bid_id: BidId::from(id),
        bidder: id.into(),
        amount,
        duration,
        placed_at: SimTime::ZERO,
        t_end: SimTime::from_secs(duration),
        rate,
        share,
        vm_id: format!("h1/{id}"),
        vm_state: None,
    }
}
