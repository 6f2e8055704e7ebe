use std::collections::BTreeMap;

use thiserror::Error;

use crate::market::Credit;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ServiceKind {
    Bank,
    Directory,
    Host,
    Auctioneer,
    Bidder,
    Lifecycle,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Time {
    At(f64),
    After(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum FaultSpec {
    VmKill(String),
    Drop { msg_type: String, from: Option<String>, to: Option<String>, count: u32 },
    Crash(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Directive {
    Name(String),
    Seed(u64),
    /// `net latency=0.01 jitter=0`
    Net(BTreeMap<String, String>),
    Spawn { kind: ServiceKind, name: Option<String>, opts: BTreeMap<String, String> },
    Open { account: String, grant: Credit },
    Bid { host: String, bid_id: String, account: String, amount: Credit, duration: f64, opts: BTreeMap<String, String> },
    Adjust { host: String, bid_id: String, duration: f64 },
    Deploy { deployment: String, file: String },
    Terminate { deployment: String },
    Inject(FaultSpec),
    Restart(String),
    Link { from: String, to: String, latency: f64 },
    At { at: f64, directive: Box<Directive> },
    Advance(Time),
    Assert { probe: Vec<String>, expected: String, tol: Option<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Line {
    pub line: usize,
    pub directive: Directive,
}

/// Splits on whitespace, keeping double-quoted strings together.
fn words(text: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '"' {
            chars.next();
            let mut w = String::new();
            loop {
                match chars.next() {
                    Some('"') => break,
                    Some(ch) => w.push(ch),
                    None => return Err("unterminated quote".into()),
                }
            }
            out.push(w);
        } else {
            let mut w = String::new();
            while let Some(&ch) = chars.peek() {
                if ch.is_whitespace() {
                    break;
                }
                w.push(ch);
                chars.next();
            }
            out.push(w);
        }
    }
    Ok(out)
}

fn num(s: &str) -> Result<f64, String> {
    s.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| format!("expected a number, found `{s}`"))
}

fn credit(s: &str) -> Result<Credit, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn options(words: &[String]) -> Result<BTreeMap<String, String>, String> {
    words
        .iter()
        .map(|w| w.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())).ok_or_else(|| format!("expected key=value, found `{w}`")))
        .collect()
}

fn arity(w: &[String], n: usize, usage: &str) -> Result<(), String> {
    if w.len() < n {
        Err(format!("usage: {usage}"))
    } else {
        Ok(())
    }
}

fn directive(w: &[String]) -> Result<Directive, String> {
    let head = w[0].as_str();
    let rest = &w[1..];
    Ok(match head {
        "name" => {
            arity(w, 2, "name <scenario>")?;
            Directive::Name(rest[0].clone())
        }
        "seed" => {
            arity(w, 2, "seed <n>")?;
            Directive::Seed(rest[0].parse().map_err(|_| format!("bad seed `{}`", rest[0]))?)
        }
        "net" => Directive::Net(options(rest)?),
        "spawn" => {
            arity(w, 2, "spawn <service> [name] [key=value...]")?;
            let kind = match rest[0].as_str() {
                "bank" => ServiceKind::Bank,
                "sls" | "directory" => ServiceKind::Directory,
                "host" => ServiceKind::Host,
                "auctioneer" => ServiceKind::Auctioneer,
                "bidder" => ServiceKind::Bidder,
                "lifecycle" | "lc" => ServiceKind::Lifecycle,
                other => return Err(format!("unknown service `{other}`")),
            };
            let (name, opts) = match rest.get(1) {
                Some(n) if !n.contains('=') => (Some(n.clone()), options(&rest[2..])?),
                _ => (None, options(&rest[1..])?),
            };
            let named = matches!(kind, ServiceKind::Host | ServiceKind::Auctioneer | ServiceKind::Bidder);
            if named && name.is_none() {
                return Err(format!("spawn {} needs a name", rest[0]));
            }
            Directive::Spawn { kind, name, opts }
        }
        "open" => {
            arity(w, 3, "open <account> <grant>")?;
            Directive::Open { account: rest[0].clone(), grant: credit(&rest[1])? }
        }
        "bid" => {
            arity(w, 6, "bid <host> <bid-id> <account> <amount> <duration> [key=value...]")?;
            Directive::Bid {
                host: rest[0].clone(),
                bid_id: rest[1].clone(),
                account: rest[2].clone(),
                amount: credit(&rest[3])?,
                duration: num(&rest[4])?,
                opts: options(&rest[5..])?,
            }
        }
        "adjust" => {
            arity(w, 4, "adjust <host> <bid-id> <duration>")?;
            Directive::Adjust { host: rest[0].clone(), bid_id: rest[1].clone(), duration: num(&rest[2])? }
        }
        "deploy" => {
            arity(w, 3, "deploy <deployment> <file.sd>")?;
            Directive::Deploy { deployment: rest[0].clone(), file: rest[1].clone() }
        }
        "terminate" => {
            arity(w, 2, "terminate <deployment>")?;
            Directive::Terminate { deployment: rest[0].clone() }
        }
        "inject" => {
            arity(w, 3, "inject vm_kill|drop|crash <target> [key=value...]")?;
            Directive::Inject(match rest[0].as_str() {
                "vm_kill" => FaultSpec::VmKill(rest[1].clone()),
                "crash" => FaultSpec::Crash(rest[1].clone()),
                "drop" => {
                    let mut o = options(&rest[2..])?;
                    let count = match o.remove("count") {
                        Some(c) => c.parse().map_err(|_| format!("bad count `{c}`"))?,
                        None => 1,
                    };
                    FaultSpec::Drop { msg_type: rest[1].clone(), from: o.remove("from"), to: o.remove("to"), count }
                }
                other => return Err(format!("unknown fault `{other}`")),
            })
        }
        "restart" => {
            arity(w, 2, "restart <endpoint>")?;
            Directive::Restart(rest[0].clone())
        }
        "link" => {
            arity(w, 4, "link <from> <to> <latency>")?;
            Directive::Link { from: rest[0].clone(), to: rest[1].clone(), latency: num(&rest[2])? }
        }
        "at" => {
            arity(w, 3, "at <t> <directive>")?;
            let inner = directive(&rest[1..])?;
            if matches!(inner, Directive::At { .. } | Directive::Advance(_) | Directive::Name(_) | Directive::Seed(_)) {
                return Err(format!("`{}` cannot be scheduled", rest[1]));
            }
            Directive::At { at: num(&rest[0])?, directive: Box::new(inner) }
        }
        "advance" => {
            arity(w, 2, "advance <t>|+<dt>")?;
            match rest[0].strip_prefix('+') {
                Some(dt) => Directive::Advance(Time::After(num(dt)?)),
                None => Directive::Advance(Time::At(num(&rest[0])?)),
            }
        }
        "assert" => {
            let eq = rest.iter().position(|x| x == "==").ok_or("usage: assert <probe...> == <expected> [tol=<x>]")?;
            if eq == 0 || eq + 1 >= rest.len() {
                return Err("usage: assert <probe...> == <expected> [tol=<x>]".into());
            }
            let mut tol = None;
            for extra in &rest[eq + 2..] {
                match extra.strip_prefix("tol=") {
                    Some(t) => tol = Some(num(t)?),
                    None => return Err(format!("unexpected `{extra}` after the expected value")),
                }
            }
            Directive::Assert { probe: rest[..eq].to_vec(), expected: rest[eq + 1].clone(), tol }
        }
        other => return Err(format!("unknown directive `{other}`")),
    })
}

/// Parses scenario text. Blank lines and `#` comments are skipped.
pub fn parse(text: &str) -> Result<Vec<Line>, ParseError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = match raw.find('#') {
            Some(h) if !raw[..h].contains('"') => &raw[..h],
            _ => raw,
        };
        let w = words(body).map_err(|message| ParseError { line, message })?;
        if w.is_empty() {
            continue;
        }
        let directive = directive(&w).map_err(|message| ParseError { line, message })?;
        out.push(Line { line, directive });
    }
    Ok(out)
}
