//! The `agora` command line.
//!
//! Settings come from flags, then `AGORA_*` environment variables, then the
//! `--config` TOML file, then built-in defaults. Exit status is 0 on success,
//! 1 when an assertion or an economic step fails (or a descriptor has
//! diagnostics), and 2 for usage, parse, and internal errors.

mod config;
mod session;

use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::auctioneer::{auctioneer_endpoint, AuctioneerService};
use crate::bank::{BankService, BANK_ENDPOINT};
use crate::bidder::{BidMode, BidPolicy, BidderAgent};
use crate::descriptor::{self, DescriptorError};
use crate::directory::{DirectoryService, DIRECTORY_ENDPOINT};
use crate::market::{Credit, HostCapacity};
use crate::report::{parse_log, RunReport};
use crate::scenario::{self, Outcome, RunOptions, ScenarioError};
use crate::simnet::{live, HostTable, RatePolicy, Service, SimHost, VmSpec};

pub use config::Config;

#[derive(Debug, Parser)]
#[command(name = "agora", version, about = "Market-based compute allocation and VM deployment on a simulated cluster")]
pub struct Cli {
    /// Seed for the deterministic runtime.
    #[arg(long, global = true, env = "AGORA_SEED")]
    pub seed: Option<u64>,
    /// Virtual time to run to, in seconds.
    #[arg(long, global = true, env = "AGORA_UNTIL")]
    pub until: Option<f64>,
    /// Directory for message logs, traces, reports, and deployment sessions.
    #[arg(long, global = true, env = "AGORA_LOG_DIR")]
    pub log_dir: Option<PathBuf>,
    /// TOML file with defaults for any of the settings.
    #[arg(long, global = true, env = "AGORA_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one service on the wall clock, speaking NDJSON envelopes on stdin/stdout.
    Daemon(DaemonArgs),
    /// Scenario files.
    #[command(subcommand)]
    Scenario(ScenarioCommand),
    /// Run a bidder agent against a simulated market.
    Bid {
        #[arg(value_enum)]
        mode: BidModeArg,
        #[command(flatten)]
        args: BidArgs,
    },
    /// Deploy a descriptor on a simulated cluster and keep the session.
    Deploy {
        file: PathBuf,
        /// Deployment id; defaults to the file stem.
        #[arg(long)]
        id: Option<String>,
        /// Scenario that sets up the cluster; a small default cluster otherwise.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Terminate a deployment from an earlier `deploy`.
    Terminate { deployment: String },
    /// Show a deployment's node states.
    Status { deployment: String },
    /// Rebuild a run report from a message log.
    Report { log: PathBuf },
    /// Descriptor tools.
    #[command(subcommand)]
    Descriptor(DescriptorCommand),
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum Role {
    Bank,
    Sls,
    Auctioneer,
}

#[derive(Debug, Args)]
pub struct DaemonArgs {
    #[arg(value_enum)]
    pub role: Role,
    #[arg(long, env = "AGORA_HOST_ID")]
    pub host_id: Option<String>,
    /// CPU capacity of the host.
    #[arg(long, env = "AGORA_CPU")]
    pub cpu: Option<f64>,
    /// Memory of the host, MiB.
    #[arg(long, env = "AGORA_MEM")]
    pub mem: Option<u64>,
    #[arg(long, env = "AGORA_DISK")]
    pub disk: Option<u64>,
    /// Seconds a VM takes to boot.
    #[arg(long, env = "AGORA_BOOT")]
    pub boot: Option<f64>,
    #[arg(long, env = "AGORA_HEARTBEAT")]
    pub heartbeat: Option<f64>,
    /// Directory liveness window, seconds.
    #[arg(long, env = "AGORA_WINDOW")]
    pub window: Option<f64>,
    /// Reserve supply of the bank.
    #[arg(long, env = "AGORA_SUPPLY")]
    pub supply: Option<Credit>,
    /// Append-only bank journal; replayed on start.
    #[arg(long, env = "AGORA_JOURNAL")]
    pub journal: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ScenarioCommand {
    /// Run a scenario; writes the log, trace, and report.
    Run { file: PathBuf },
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum BidModeArg {
    Once,
    Auto,
}

#[derive(Debug, Args)]
pub struct BidArgs {
    #[arg(long)]
    pub account: String,
    #[arg(long)]
    pub target: f64,
    #[arg(long)]
    pub budget: Credit,
    /// Planned duration, seconds.
    #[arg(long, default_value_t = 100.0)]
    pub duration: f64,
    /// Seconds between best-response checks.
    #[arg(long, default_value_t = 1.0)]
    pub check: f64,
    #[arg(long, default_value_t = 512)]
    pub memory: u64,
    /// Scenario that sets up the market; a small default market otherwise.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum DescriptorCommand {
    /// Parse and print the file back in canonical form.
    Parse(DescriptorArgs),
    /// Flatten prototypes and resolve references; print the sfConfig tree.
    Resolve(DescriptorArgs),
    /// Rewrite the file in canonical form (to stdout, or in place with --write).
    Fmt {
        #[command(flatten)]
        args: DescriptorArgs,
        #[arg(long)]
        write: bool,
    },
    /// Resolve and report likely mistakes.
    Lint(DescriptorArgs),
}

#[derive(Debug, Args)]
pub struct DescriptorArgs {
    pub file: PathBuf,
    /// Extra prototype files.
    #[arg(short = 'I', long = "include")]
    pub include: Vec<PathBuf>,
}

/// A failure with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    fn diagnostic(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }
}

type CliResult = Result<u8, Failure>;

/// Parses arguments and runs; returns the exit status.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let stdout = io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("agora: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Runs a parsed command line, writing results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    let cfg = Config::load(cli.config.as_deref()).map_err(Failure::usage)?;
    let settings = Settings {
        seed: cli.seed.or(cfg.seed),
        until: cli.until.or(cfg.until),
        log_dir: cli.log_dir.clone().or(cfg.log_dir.clone()).unwrap_or_else(|| PathBuf::from("runs")),
    };
    let w = |out: &mut dyn Write, text: &str| out.write_all(text.as_bytes()).map_err(|e| Failure::usage(e.to_string()));
    match cli.command {
        Command::Daemon(args) => daemon(args, &cfg, settings.seed.unwrap_or(0)),
        Command::Scenario(ScenarioCommand::Run { file }) => {
            let opts = RunOptions { seed: settings.seed, until: settings.until, base_dir: None };
            let outcome = scenario::run_file(&file, &opts).map_err(scenario_failure)?;
            save_run(&settings.log_dir, &outcome.name, &outcome)?;
            w(out, &outcome.report.render())?;
            Ok(if outcome.passed() { 0 } else { 1 })
        }
        Command::Bid { mode, args } => bid(mode, args, &settings, out),
        Command::Deploy { file, id, scenario } => {
            let text = session::deploy(&settings, &file, id.as_deref(), scenario.as_deref())?;
            w(out, &text)?;
            Ok(0)
        }
        Command::Terminate { deployment } => {
            let text = session::terminate(&settings, &deployment)?;
            w(out, &text)?;
            Ok(0)
        }
        Command::Status { deployment } => {
            let text = session::status(&settings, &deployment)?;
            w(out, &text)?;
            Ok(0)
        }
        Command::Report { log } => {
            let text = std::fs::read_to_string(&log).map_err(|e| Failure::usage(format!("{}: {e}", log.display())))?;
            let envelopes = parse_log(&text).map_err(|e| Failure::usage(format!("{}: {e}", log.display())))?;
            let report = RunReport::from_log(&envelopes);
            w(out, &report.render())?;
            Ok(0)
        }
        Command::Descriptor(cmd) => descriptor_command(cmd, out),
    }
}

struct Settings {
    seed: Option<u64>,
    until: Option<f64>,
    log_dir: PathBuf,
}

fn scenario_failure(e: ScenarioError) -> Failure {
    Failure::usage(e.to_string())
}

fn save_run(dir: &Path, name: &str, outcome: &Outcome) -> Result<(), Failure> {
    let io = |e: io::Error| Failure::usage(format!("{}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    std::fs::write(dir.join(format!("{name}.log")), outcome.log_text()).map_err(io)?;
    std::fs::write(dir.join(format!("{name}.trace")), outcome.trace_text()).map_err(io)?;
    std::fs::write(dir.join(format!("{name}.report")), outcome.report.render()).map_err(io)?;
    Ok(())
}

fn daemon(args: DaemonArgs, cfg: &Config, seed: u64) -> CliResult {
    let d = &cfg.daemon;
    let (endpoint, service, hosts): (String, Box<dyn Service>, HostTable) = match args.role {
        Role::Bank => {
            let supply = args.supply.or(d.supply).unwrap_or(crate::bank::DEFAULT_RESERVE_SUPPLY);
            let svc = match args.journal.or(d.journal.clone()) {
                Some(path) => BankService::with_journal(path, supply).map_err(|e| Failure::usage(e.to_string()))?,
                None => BankService::new(supply),
            };
            (BANK_ENDPOINT.into(), Box::new(svc), HostTable::new())
        }
        Role::Sls => {
            let window = args.window.or(d.window).unwrap_or(crate::directory::DEFAULT_LIVENESS_WINDOW);
            (DIRECTORY_ENDPOINT.into(), Box::new(DirectoryService::new(window)), HostTable::new())
        }
        Role::Auctioneer => {
            let missing = |flag: &str| Failure::usage(format!("daemon auctioneer needs --{flag}\n\nUsage: agora daemon auctioneer --host-id <ID> --cpu <CPU> --mem <MIB>"));
            let host_id = args.host_id.or(d.host_id.clone()).ok_or_else(|| missing("host-id"))?;
            let cpu = args.cpu.or(d.cpu).ok_or_else(|| missing("cpu"))?;
            let mem = args.mem.or(d.mem).ok_or_else(|| missing("mem"))?;
            let capacity = HostCapacity::new(cpu, mem).map_err(|e| Failure::usage(e.to_string()))?;
            let host = SimHost::new(&host_id, capacity, args.disk.or(d.disk).unwrap_or(100_000), RatePolicy::Market)
                .with_boot_delay(args.boot.or(d.boot).unwrap_or(5.0));
            let mut hosts = HostTable::new();
            hosts.insert(host);
            let mut svc = AuctioneerService::new(&host_id);
            if let Some(h) = args.heartbeat.or(d.heartbeat) {
                svc = svc.with_heartbeat_interval(h);
            }
            (auctioneer_endpoint(&host_id), Box::new(svc), hosts)
        }
    };
    log::info!("serving {endpoint}");
    let stdin = BufReader::new(io::stdin());
    live::run(&endpoint, service, hosts, seed, stdin, io::stdout()).map_err(|e| Failure::usage(e.to_string()))?;
    Ok(0)
}

const DEFAULT_MARKET: &str = "
name market
spawn bank
spawn sls
spawn auctioneer h1 cpu=1 mem=4096 boot=5
spawn auctioneer h2 cpu=2 mem=8192 boot=5
";

fn bid(mode: BidModeArg, a: BidArgs, s: &Settings, out: &mut dyn Write) -> CliResult {
    let setup = match &a.scenario {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?,
        None => DEFAULT_MARKET.to_string(),
    };
    let policy = BidPolicy { target_share: a.target, budget: a.budget, planned_duration: a.duration, check_interval: a.check };
    policy.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let spec = VmSpec { memory: a.memory, ..VmSpec::default() };
    let opts = RunOptions { seed: s.seed, until: None, base_dir: a.scenario.as_ref().and_then(|p| p.parent().map(Path::to_path_buf)) };
    let mut outcome = scenario::run_source(&setup, &opts).map_err(scenario_failure)?;
    let world = &mut outcome.world;
    let now = world.now();
    world.send(scenario::DRIVER, BANK_ENDPOINT, "bank.open", serde_json::json!({"account": a.account, "grant": a.budget}));
    world.advance(now.after(0.1)).map_err(|e| Failure::usage(e.to_string()))?;
    let mode = if mode == BidModeArg::Auto { BidMode::Auto } else { BidMode::Once };
    let endpoint = format!("bidder/{}", a.account);
    world.spawn(&endpoint, Box::new(BidderAgent::new(&a.account, policy, spec, mode))).map_err(|e| Failure::usage(e.to_string()))?;
    let until = crate::time::SimTime::from_secs(s.until.unwrap_or(now.as_secs() + a.duration));
    let until = until.max(world.now());
    world.advance(until).map_err(|e| Failure::usage(e.to_string()))?;
    world.record("sim.end", serde_json::json!({"at": world.now()}));
    let agent = world.service::<BidderAgent>(&endpoint).expect("just spawned");
    let (host, vm) = (agent.host().map(str::to_string), agent.vm_id().map(str::to_string));
    let notes: Vec<String> = world
        .log()
        .iter()
        .filter(|l| l.contains("\"bidder.") && l.contains(&format!("\"bidder\":\"{}\"", a.account)))
        .cloned()
        .collect();
    save_run(&s.log_dir, &format!("bid-{}", a.account), &outcome)?;
    let mut text = String::new();
    for n in &notes {
        text.push_str(n);
        text.push('\n');
    }
    match (host, vm) {
        (Some(h), Some(v)) => {
            let share = outcome
                .world
                .service::<AuctioneerService>(&auctioneer_endpoint(&h))
                .and_then(|auc| auc.shares().get(&crate::market::BidId(format!("{}-1", a.account))))
                .unwrap_or(0.0);
            text.push_str(&format!("host {h}\nvm {v}\nshare {share}\n"));
            out.write_all(text.as_bytes()).map_err(|e| Failure::usage(e.to_string()))?;
            Ok(0)
        }
        _ => {
            text.push_str("no bid is running\n");
            out.write_all(text.as_bytes()).map_err(|e| Failure::usage(e.to_string()))?;
            Ok(1)
        }
    }
}

fn load_includes(paths: &[PathBuf]) -> Result<Vec<Vec<descriptor::ComponentDescription>>, Failure> {
    paths.iter().map(|p| descriptor::load_file(p).map_err(descriptor_failure)).collect()
}

fn descriptor_failure(e: DescriptorError) -> Failure {
    match e {
        DescriptorError::Io { .. } => Failure::usage(e.to_string()),
        _ => Failure::diagnostic(e.to_string()),
    }
}

fn descriptor_command(cmd: DescriptorCommand, out: &mut dyn Write) -> CliResult {
    let w = |out: &mut dyn Write, text: &str| out.write_all(text.as_bytes()).map_err(|e| Failure::usage(e.to_string()));
    match cmd {
        DescriptorCommand::Parse(a) => {
            let file = descriptor::load_file(&a.file).map_err(descriptor_failure)?;
            w(out, &descriptor::print_file(&file))?;
            Ok(0)
        }
        DescriptorCommand::Resolve(a) => {
            let includes = load_includes(&a.include)?;
            let file = descriptor::load_file(&a.file).map_err(descriptor_failure)?;
            let root = descriptor::resolve_components(&file, &includes).map_err(descriptor_failure)?;
            w(out, &descriptor::print(&root))?;
            Ok(0)
        }
        DescriptorCommand::Fmt { args, write } => {
            let file = descriptor::load_file(&args.file).map_err(descriptor_failure)?;
            let text = descriptor::print_file(&file);
            if write {
                std::fs::write(&args.file, text).map_err(|e| Failure::usage(format!("{}: {e}", args.file.display())))?;
            } else {
                w(out, &text)?;
            }
            Ok(0)
        }
        DescriptorCommand::Lint(a) => {
            let includes = load_includes(&a.include)?;
            let file = descriptor::load_file(&a.file).map_err(descriptor_failure)?;
            let root = descriptor::resolve_components(&file, &includes).map_err(descriptor_failure)?;
            let problems = descriptor::lint(&root);
            for p in &problems {
                w(out, &format!("{}: {p}\n", a.file.display()))?;
            }
            Ok(if problems.is_empty() { 0 } else { 1 })
        }
    }
}
