//! Deployments that outlive one invocation.
//!
//! `deploy` writes a session script (the cluster setup plus the deploy) and
//! a copy of the descriptor under the log directory. `terminate` appends to
//! the script and `status` replays it; the runtime is deterministic, so a
//! replay reaches exactly the state the earlier invocation left.

use std::path::{Path, PathBuf};

use serde_json::Value;

use super::{save_run, scenario_failure, Failure, Settings};
use crate::lifecycle::{LifecycleService, LIFECYCLE_ENDPOINT};
use crate::scenario::{self, Directive, Outcome, RunOptions, ServiceKind, DRIVER};
use crate::simnet::Mailbox;

const DEFAULT_CLUSTER: &str = "\
name deploy
spawn bank
spawn sls
spawn lifecycle
spawn host n1 cpu=4 mem=8192 disk=100000
spawn auctioneer h1 cpu=2 mem=8192 boot=5
open buyer 1000.00
advance 0.1
";

fn session_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.session.scn"))
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::usage(format!("{}: {e}", path.display()))
}

fn advance_line(s: &Settings, default_secs: f64) -> String {
    match s.until {
        Some(t) => format!("advance {t}\n"),
        None => format!("advance +{default_secs}\n"),
    }
}

fn replay(s: &Settings, script: &str) -> Result<Outcome, Failure> {
    let opts = RunOptions { seed: None, until: None, base_dir: Some(s.log_dir.clone()) };
    scenario::run_source(script, &opts).map_err(scenario_failure)
}

fn status_text(out: &Outcome, id: &str) -> Result<String, Failure> {
    let lc = out.world.service::<LifecycleService>(LIFECYCLE_ENDPOINT).ok_or_else(|| Failure::usage("the session has no lifecycle service"))?;
    let dep = lc.deployment(id).ok_or_else(|| Failure::diagnostic(format!("deployment `{id}` was not accepted")))?;
    let mut text = serde_json::to_string_pretty(&dep.status()).expect("plain JSON");
    text.push('\n');
    Ok(text)
}

/// The error reply to the most recent `lc.*` request, if there was one.
fn refusal(out: &Outcome) -> Option<String> {
    let mb = out.world.service::<Mailbox>(DRIVER)?;
    let last = mb.received.iter().rev().find(|e| e.msg_type.starts_with("lc."))?;
    last.msg_type.ends_with(".err").then(|| last.body.get("message").and_then(Value::as_str).unwrap_or("refused").to_string())
}

pub(super) fn deploy(s: &Settings, file: &Path, id: Option<&str>, setup: Option<&Path>) -> Result<String, Failure> {
    let id = match id {
        Some(i) => i.to_string(),
        None => file.file_stem().and_then(|x| x.to_str()).ok_or_else(|| Failure::usage("cannot name the deployment; pass --id"))?.to_string(),
    };
    let source = std::fs::read_to_string(file).map_err(|e| io_failure(file, e))?;
    let mut script = match setup {
        Some(p) => std::fs::read_to_string(p).map_err(|e| io_failure(p, e))?,
        None => DEFAULT_CLUSTER.to_string(),
    };
    let lines = scenario::parse(&script).map_err(|e| Failure::usage(e.to_string()))?;
    if !lines.iter().any(|l| matches!(l.directive, Directive::Spawn { kind: ServiceKind::Lifecycle, .. })) {
        script.push_str("\nspawn lifecycle\n");
    }
    std::fs::create_dir_all(&s.log_dir).map_err(|e| io_failure(&s.log_dir, e))?;
    let sd = s.log_dir.join(format!("{id}.sd"));
    std::fs::write(&sd, &source).map_err(|e| io_failure(&sd, e))?;
    if let Some(seed) = s.seed {
        script.push_str(&format!("\nseed {seed}\n"));
    }
    script.push_str(&format!("\ndeploy {id} {id}.sd\n"));
    script.push_str(&advance_line(s, 60.0));
    let out = replay(s, &script)?;
    if let Some(why) = refusal(&out) {
        return Err(Failure::diagnostic(format!("{}: {why}", file.display())));
    }
    let path = session_path(&s.log_dir, &id);
    std::fs::write(&path, &script).map_err(|e| io_failure(&path, e))?;
    save_run(&s.log_dir, &id, &out)?;
    status_text(&out, &id)
}

fn load(s: &Settings, id: &str) -> Result<String, Failure> {
    let path = session_path(&s.log_dir, id);
    std::fs::read_to_string(&path).map_err(|e| Failure::usage(format!("no session for `{id}` ({}: {e})", path.display())))
}

pub(super) fn terminate(s: &Settings, id: &str) -> Result<String, Failure> {
    let mut script = load(s, id)?;
    script.push_str(&format!("terminate {id}\n"));
    script.push_str(&advance_line(s, 30.0));
    let out = replay(s, &script)?;
    let path = session_path(&s.log_dir, id);
    std::fs::write(&path, &script).map_err(|e| io_failure(&path, e))?;
    save_run(&s.log_dir, id, &out)?;
    status_text(&out, id)
}

pub(super) fn status(s: &Settings, id: &str) -> Result<String, Failure> {
    let out = replay(s, &load(s, id)?)?;
    status_text(&out, id)
}
