mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use agora::descriptor::{self, ComponentDescription, RefKind, Reference, Value};
use agora::report::parse_log;
use agora::scenario::{run_source, RunOptions};
use common::props;

#[test]
fn shares_obey_the_share_law() {
    props::share_law(10_000).unwrap();
}

#[test]
fn required_rate_round_trips_and_price_is_linear() {
    props::required_rate_and_price(10_000).unwrap();
}

#[test]
fn bank_conserves_credit() {
    props::bank_conservation(100, 100).unwrap();
}

#[test]
fn ranked_query_matches_brute_force() {
    props::ranked_query(1_000).unwrap();
}

#[test]
fn lifecycle_survives_random_faults() {
    props::lifecycle_fault_runs(1_000).unwrap();
}

// Descriptor trees.

fn ident() -> impl Strategy<Value = String> {
    "[a-z][a-zA-Z0-9_]{0,5}".prop_map(|s| format!("x{s}"))
}

fn reference() -> impl Strategy<Value = Reference> {
    let segs = || prop::collection::vec(ident(), 0..3);
    prop_oneof![
        ident().prop_map(|n| (RefKind::Attrib, vec![n])),
        segs().prop_map(|s| (RefKind::Path, std::iter::once("sfConfig".to_string()).chain(s).collect())),
        (1usize..3, segs()).prop_map(|(ups, s)| (RefKind::ParentChain, std::iter::repeat_n("PARENT".to_string(), ups).chain(s).collect())),
    ]
    .prop_flat_map(|(kind, segments)| any::<bool>().prop_map(move |lazy| Reference { kind, segments: segments.clone(), lazy }))
}

fn value() -> impl Strategy<Value = Value> {
    prop_oneof![
        "[ -~\t\n]{0,12}".prop_map(Value::Str),
        any::<i64>().prop_map(Value::Int),
        any::<f64>().prop_filter("finite", |r| r.is_finite()).prop_map(Value::Real),
        any::<bool>().prop_map(Value::Bool),
        reference().prop_map(Value::Ref),
    ]
}

fn node(name: String) -> impl Strategy<Value = ComponentDescription> {
    let leaf = (prop::collection::vec((ident(), value()), 0..5), prop::option::of(ident())).prop_map(|(attrs, extends)| {
        let mut n = ComponentDescription::new("");
        n.extends = extends;
        for (k, v) in attrs {
            n.attributes.insert(format!("a{k}"), v);
        }
        n
    });
    leaf.prop_recursive(3, 24, 4, |inner| {
        (inner.clone(), prop::collection::vec((ident(), inner), 0..4)).prop_map(|(mut n, kids)| {
            for (k, mut c) in kids {
                c.name = format!("c{k}");
                n.children.insert(c.name.clone(), c);
            }
            n
        })
    })
    .prop_map(move |mut n| {
        n.name = name.clone();
        n
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn printed_trees_read_back(root in node("sfConfig".into()), proto in node("Proto".into())) {
        let file = vec![proto, root];
        let text = descriptor::print_file(&file);
        prop_assert_eq!(descriptor::parse_file(&text).unwrap(), file);
    }

    #[test]
    fn flattening_a_flat_tree_changes_nothing(root in node("sfConfig".into())) {
        fn strip(n: &mut ComponentDescription) {
            n.extends = None;
            n.children.values_mut().for_each(strip);
        }
        let mut flat = root;
        strip(&mut flat);
        prop_assert_eq!(descriptor::resolve_extends(&flat, &Default::default()).unwrap(), flat);
    }

    /// References written in a prototype see the value the extension put
    /// in, however deep the chain.
    #[test]
    fn references_see_overrides(values in prop::collection::vec(any::<i32>(), 1..6)) {
        let mut src = format!("L0 {{ v {}; r ATTRIB v; k {{ p PARENT:v; }} }}\n", values[0]);
        for (i, v) in values.iter().enumerate().skip(1) {
            src.push_str(&format!("L{i} extends L{} {{ v {v}; }}\n", i - 1));
        }
        src.push_str(&format!("sfConfig extends L{};\n", values.len() - 1));
        let t = descriptor::resolve_source(&src, &[]).unwrap();
        let last = Value::Int(*values.last().unwrap() as i64);
        prop_assert_eq!(t.attr("r"), Some(&last));
        prop_assert_eq!(t.children["k"].attr("p"), Some(&last));
    }

    /// ATTRIB and path references on random trees against a naive walk.
    #[test]
    fn references_resolve_like_a_naive_walk(shape in attrib_tree()) {
        let (tree, refs) = shape;
        let resolved = descriptor::resolve_references(&tree);
        if refs.iter().any(|r| r.2.is_none()) {
            let unresolvable = matches!(resolved, Err(descriptor::DescriptorError::Unresolvable { .. }));
            prop_assert!(unresolvable, "{:?}", resolved);
            return Ok(());
        }
        let resolved = resolved.unwrap();
        for (path, attr, want) in refs {
            let got = resolved.at(&path).and_then(|n| n.attr(&attr)).cloned();
            prop_assert_eq!(got, want.clone(), "{}:{}", descriptor::path_string(&path), attr);
        }
    }
}

#[derive(Clone, Debug)]
struct Defs {
    defs: BTreeMap<&'static str, i16>,
    kids: Vec<Defs>,
}

/// A random tree where nodes define some of `p`, `q`, `r` as integers (the
/// root defines all three) and every node gets an `ATTRIB` reference and a
/// path reference, each paired with the value a plain ancestor walk finds.
#[allow(clippy::type_complexity)]
fn attrib_tree() -> impl Strategy<Value = (ComponentDescription, Vec<(Vec<String>, String, Option<Value>)>)> {
    let defs = || prop::collection::btree_map(prop::sample::select(vec!["p", "q", "r"]), any::<i16>(), 0..3);
    let tree = defs().prop_map(|defs| Defs { defs, kids: vec![] }).prop_recursive(3, 20, 3, move |inner| {
        (defs(), prop::collection::vec(inner, 0..3)).prop_map(|(defs, kids)| Defs { defs, kids })
    });
    let root_defs = (any::<i16>(), any::<i16>(), any::<i16>());
    (tree, root_defs, prop::sample::select(vec!["p", "q", "r"]), any::<prop::sample::Index>()).prop_map(|(mut t, (p, q, r), name, pick)| {
        fn build(d: &Defs, name: &str) -> ComponentDescription {
            let mut n = ComponentDescription::new(name);
            for (k, v) in &d.defs {
                n.attributes.insert(k.to_string(), Value::Int(*v as i64));
            }
            for (i, k) in d.kids.iter().enumerate() {
                n.children.insert(format!("k{i}"), build(k, &format!("k{i}")));
            }
            n
        }
        t.defs.extend([("p", p), ("q", q), ("r", r)]);
        let mut root = build(&t, "sfConfig");
        let paths = root.paths();
        let target: Vec<String> = paths[pick.index(paths.len())].clone();
        // Walk the path down from the root, remembering the last definition.
        let below = |path: &[String]| {
            let mut found = None;
            for depth in 0..=path.len() {
                if let Some(v) = root.at(&path[..depth]).unwrap().attr(name) {
                    found = Some(v.clone());
                }
            }
            found
        };
        // A path to a node lacking the name does not resolve.
        let direct = root.at(&target).unwrap().attr(name).cloned();
        let mut expect = Vec::new();
        for path in &paths {
            expect.push((path.clone(), "up".to_string(), below(path)));
            expect.push((path.clone(), "down".to_string(), direct.clone()));
        }
        for path in &paths {
            let n = root.at_mut(path).unwrap();
            n.attributes.insert("up".into(), Value::Ref(Reference { kind: RefKind::Attrib, segments: vec![name.into()], lazy: false }));
            let mut segs = vec!["sfConfig".to_string()];
            segs.extend(target.iter().cloned());
            segs.push(name.to_string());
            n.attributes.insert("down".into(), Value::Ref(Reference { kind: RefKind::Path, segments: segs, lazy: false }));
        }
        (root, expect)
    })
}

// Bidding.

#[test]
fn one_best_response_step_reaches_the_target() {
    props::best_response(2_000).unwrap();
}

// A whole host under random bids and adjustments.

#[derive(Clone, Debug)]
struct MarketPlan {
    cpu: f64,
    mem: u64,
    bids: Vec<(u64, f64, u64)>,
    adjusts: Vec<(f64, usize, f64)>,
}

fn market_plan() -> impl Strategy<Value = MarketPlan> {
    (
        prop::sample::select(vec![0.5, 1.0, 4.0]),
        prop::sample::select(vec![1024u64, 4096]),
        prop::collection::vec((100u64..50_000, 20.0f64..120.0, prop::sample::select(vec![256u64, 512, 1024])), 1..8),
        prop::collection::vec((5.0f64..50.0, 0usize..8, 10.0f64..150.0), 0..6),
    )
        .prop_map(|(cpu, mem, bids, adjusts)| MarketPlan { cpu, mem, bids, adjusts })
}

fn market_script(plan: &MarketPlan) -> String {
    let mut s = format!("spawn bank\nspawn sls\nspawn auctioneer h1 cpu={} mem={} boot=1\n", plan.cpu, plan.mem);
    for i in 0..plan.bids.len() {
        s.push_str(&format!("open u{i} 1000.00\n"));
    }
    s.push_str("advance 0.1\n");
    for (i, (cents, dur, mem)) in plan.bids.iter().enumerate() {
        s.push_str(&format!("bid h1 b{i} u{i} {}.{:02} {dur} memory={mem}\n", cents / 100, cents % 100));
    }
    let mut timed: Vec<(f64, String)> = Vec::new();
    for (t, b, d) in &plan.adjusts {
        timed.push((*t, format!("adjust h1 b{} {d}", b % plan.bids.len())));
    }
    timed.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (t, d) in timed {
        s.push_str(&format!("at {t} {d}\n"));
    }
    s.push_str("advance 200\n");
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    /// Read back from the log alone: the host never hands out more CPU than
    /// it has and hands out all of it while any VM runs, shares sum to one,
    /// and once the bids are paid for nothing more goes to the bank.
    #[test]
    fn auctioneer_keeps_its_invariants(plan in market_plan()) {
        let out = run_source(&market_script(&plan), &RunOptions::default()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let envs = parse_log(&out.log_text()).unwrap();
        let mut rates: BTreeMap<String, (String, f64)> = BTreeMap::new();
        let mut i = 0;
        while i < envs.len() {
            let at = envs[i].sent_at;
            while i < envs.len() && envs[i].sent_at == at {
                let e = &envs[i];
                match e.msg_type.as_str() {
                    "sim.vm" => {
                        let state = e.body["state"].as_str().unwrap().to_string();
                        rates.insert(e.body["vm"].as_str().unwrap().into(), (state, e.body["cpu_rate"].as_f64().unwrap()));
                    }
                    "auc.shares" => {
                        let s: f64 = e.body["shares"].as_object().unwrap().values().map(|v| v.as_f64().unwrap()).sum();
                        let n = e.body["shares"].as_object().unwrap().len();
                        prop_assert!(n == 0 || (s - 1.0).abs() <= 1e-9, "shares sum {s}");
                    }
                    t if t.starts_with("bank.") && at.as_secs() >= 5.0 => {
                        return Err(TestCaseError::fail(format!("{t} at {at}")));
                    }
                    _ => {}
                }
                i += 1;
            }
            let total: f64 = rates.values().filter(|(s, _)| s != "DEAD").map(|(_, r)| r).sum();
            let active = rates.values().any(|(s, _)| s == "RUNNING" || s == "BOOTING");
            prop_assert!(total <= plan.cpu + 1e-9, "{total} of {} at {at}", plan.cpu);
            if active {
                prop_assert!((total - plan.cpu).abs() <= 1e-9, "only {total} of {} handed out at {at}", plan.cpu);
            }
        }
        let host = out.world.hosts().get("h1").unwrap();
        prop_assert!(host.memory_reserved() <= plan.mem);
    }
}
