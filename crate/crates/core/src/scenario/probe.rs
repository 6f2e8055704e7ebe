use std::collections::BTreeMap;

use crate::auctioneer::{auctioneer_endpoint, AuctioneerService};
use crate::bank::{BankService, BANK_ENDPOINT};
use crate::bidder::BidderAgent;
use crate::directory::{DirectoryService, DIRECTORY_ENDPOINT};
use crate::lifecycle::{LifecycleService, LIFECYCLE_ENDPOINT};
use crate::market::BidId;
use crate::report::{check_lifecycle_order, parse_log};
use crate::simnet::envelope::type_matches;
use crate::simnet::{Envelope, World};
use crate::time::SimTime;

fn service<'a, T: 'static>(w: &'a World, endpoint: &str) -> Result<&'a T, String> {
    w.service::<T>(endpoint).ok_or_else(|| format!("no running `{endpoint}`"))
}

fn arg<'a>(words: &'a [String], i: usize, usage: &str) -> Result<&'a str, String> {
    words.get(i).map(String::as_str).ok_or_else(|| format!("usage: {usage}"))
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn envelopes(w: &World) -> Vec<Envelope> {
    parse_log(&w.log().join("\n")).expect("the world writes well-formed lines")
}

/// Reads one value out of the running world. Every probe answers in text.
///
/// | probe | value |
/// |---|---|
/// | `share <host> <bid>` | the bid's current share |
/// | `price <host>` | auctioneer price |
/// | `sls.price <host>` / `sls.live <host>` | directory view |
/// | `sls.rank` | live hosts, cheapest first, comma separated |
/// | `balance <account>` / `bank.total` | bank ledger |
/// | `cpu <vm>` / `rate <vm>` / `vm.state <vm>` | hypervisor view |
/// | `host.restored <host>` | ledger equals the one taken at creation |
/// | `node.state <dep> <path>` / `node.attr <dep> <path> <attr>` / `dep.phase <dep>` | lifecycle |
/// | `bidder.host <account>` | where a bidder agent holds its bid |
/// | `msgs <type-pattern> [since=<t>] [until=<t>]` | count of bus messages |
/// | `trace.order [<dep>]` | `ok` or the first ordering violation |
pub fn probe(w: &World, snapshots: &BTreeMap<String, String>, words: &[String]) -> Result<String, String> {
    let head = words.first().map(String::as_str).unwrap_or_default();
    match head {
        "share" => {
            let (host, bid) = (arg(words, 1, "share <host> <bid>")?, arg(words, 2, "share <host> <bid>")?);
            let auc = service::<AuctioneerService>(w, &auctioneer_endpoint(host))?;
            Ok(num(auc.shares().get(&BidId(bid.to_string())).unwrap_or(0.0)))
        }
        "price" => {
            let host = arg(words, 1, "price <host>")?;
            Ok(num(service::<AuctioneerService>(w, &auctioneer_endpoint(host))?.price()))
        }
        "sls.price" => {
            let host = arg(words, 1, "sls.price <host>")?;
            let d = service::<DirectoryService>(w, DIRECTORY_ENDPOINT)?.directory();
            d.get(host).map(|r| num(r.current_price)).ok_or_else(|| format!("`{host}` is not registered"))
        }
        "sls.live" => {
            let host = arg(words, 1, "sls.live <host>")?;
            let d = service::<DirectoryService>(w, DIRECTORY_ENDPOINT)?.directory();
            Ok(d.query_ranked(usize::MAX, w.now()).iter().any(|r| r.host_id == host).to_string())
        }
        "sls.rank" => {
            let d = service::<DirectoryService>(w, DIRECTORY_ENDPOINT)?.directory();
            Ok(d.query_ranked(usize::MAX, w.now()).iter().map(|r| r.host_id.as_str()).collect::<Vec<_>>().join(","))
        }
        "balance" => {
            let acct = arg(words, 1, "balance <account>")?;
            let bank = service::<BankService>(w, BANK_ENDPOINT)?.bank();
            bank.balance(acct).map(|c| c.to_string()).map_err(|e| e.to_string())
        }
        "bank.total" => Ok(service::<BankService>(w, BANK_ENDPOINT)?.bank().total().to_string()),
        "cpu" | "rate" | "vm.state" => {
            let vm = arg(words, 1, "cpu|rate|vm.state <vm>")?;
            let Some(inst) = w.hosts().vm_or_retired(vm) else {
                return if head == "vm.state" { Ok("absent".into()) } else { Err(format!("no vm `{vm}`")) };
            };
            Ok(match head {
                "cpu" => num(inst.accumulated_cpu_seconds),
                "rate" => num(inst.cpu_rate),
                _ => inst.state.to_string(),
            })
        }
        "host.restored" => {
            let host = arg(words, 1, "host.restored <host>")?;
            let before = snapshots.get(host).ok_or_else(|| format!("no snapshot of `{host}`"))?;
            Ok((w.hosts().ledger_snapshot(host).as_ref() == Some(before)).to_string())
        }
        "node.state" | "node.attr" | "dep.phase" => {
            let dep_id = arg(words, 1, "node.state <dep> <path>")?;
            let lc = service::<LifecycleService>(w, LIFECYCLE_ENDPOINT)?;
            let dep = lc.deployment(dep_id).ok_or_else(|| format!("no deployment `{dep_id}`"))?;
            if head == "dep.phase" {
                return Ok(serde_json::to_value(dep.phase).expect("enum").as_str().unwrap_or_default().to_string());
            }
            let path = arg(words, 2, "node.state <dep> <path>")?;
            let node = dep.node_by_path(path).ok_or_else(|| format!("no node `{path}`"))?;
            if head == "node.state" {
                return Ok(node.state.to_string());
            }
            let attr = arg(words, 3, "node.attr <dep> <path> <attr>")?;
            let desc = dep.live.at(&node.path).expect("node paths exist in the live tree");
            desc.attr(attr).map(|v| v.as_str().map(str::to_string).unwrap_or_else(|| v.to_json().to_string())).ok_or_else(|| format!("no attribute `{attr}`"))
        }
        "bidder.host" => {
            let acct = arg(words, 1, "bidder.host <account>")?;
            let b = service::<BidderAgent>(w, &format!("bidder/{acct}"))?;
            Ok(b.host().unwrap_or("none").to_string())
        }
        "msgs" => {
            let pattern = arg(words, 1, "msgs <type-pattern> [since=<t>] [until=<t>]")?;
            let mut since = SimTime::ZERO;
            let mut until = SimTime::from_micros(u64::MAX);
            for extra in &words[2..] {
                let (k, v) = extra.split_once('=').ok_or_else(|| format!("expected key=value, found `{extra}`"))?;
                let t = SimTime::from_secs(v.parse::<f64>().map_err(|_| format!("bad time `{v}`"))?);
                match k {
                    "since" => since = t,
                    "until" => until = t,
                    _ => return Err(format!("unknown option `{k}`")),
                }
            }
            let n = envelopes(w)
                .iter()
                .filter(|e| e.sender != "sim" && e.sent_at >= since && e.sent_at <= until && type_matches(pattern, &e.msg_type))
                .count();
            Ok(n.to_string())
        }
        "trace.order" => {
            let dep = words.get(1).map(String::as_str);
            Ok(match check_lifecycle_order(&envelopes(w), dep) {
                Ok(()) => "ok".into(),
                Err(e) => e,
            })
        }
        "" => Err("empty probe".into()),
        other => Err(format!("unknown probe `{other}`")),
    }
}
