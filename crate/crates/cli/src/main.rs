use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bip_core::audit::{backward_slice, read_log_file};
use bip_core::simlab::{
    enumerate_traces, mcp_github, run_scenario_with, stage_table, EnumerationParams, RunOptions, Scenario, StageTable,
};
use bip_core::{check_theorem1, PolicyMode, RiskClass, RiskTable, TrustLevel};
use bip_hitl::{Gateway, Server};
use clap::{Parser, Subcommand, ValueEnum};

/// Belief-aware authorization monitor for agent tool calls.
#[derive(Parser)]
#[command(name = "bip", version)]
struct Cli {
    /// Directory for logs written without an explicit path.
    #[arg(long, env = "BIP_LOG_DIR", global = true)]
    log_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Aware,
    Blind,
}

impl From<Mode> for PolicyMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Aware => PolicyMode::BeliefAware,
            Mode::Blind => PolicyMode::BeliefBlind,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DemoMode {
    /// Scope whitelist only.
    Before,
    /// Belief-aware enforcement.
    After,
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Demo {
    McpGithub,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a scenario file and write its audit log.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the mode declared in the scenario.
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        theta: Option<f64>,
    },
    /// Replay a built-in case study and print its stage table.
    Demo {
        #[arg(value_enum)]
        name: Demo,
        #[arg(long)]
        mode: DemoMode,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Check a log for high-risk executions not backed by trusted beliefs.
    /// Exits 0 when clean, 2 on violations, 1 on errors.
    Check {
        #[arg(long)]
        log: PathBuf,
        #[command(flatten)]
        table: TableArgs,
    },
    /// Print the beliefs behind an exec record.
    Slice {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        exec: u64,
    },
    /// Exhaustively run every event sequence over a small alphabet.
    /// Exits 2 when some trace violates trace safety.
    Enumerate {
        #[arg(long, default_value_t = 6)]
        max_len: usize,
        #[arg(long, default_value_t = 0)]
        high_beliefs: usize,
        #[arg(long, default_value_t = 0)]
        low_beliefs: usize,
        #[arg(long, default_value_t = 0)]
        high_actions: usize,
        #[arg(long, default_value_t = 0)]
        low_actions: usize,
        #[arg(long)]
        mode: Mode,
        /// Leave out the timeout branch of pending reviews.
        #[arg(long)]
        no_timeout: bool,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Serve the review gateway, optionally driving scenarios through it.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = bip_hitl::DEFAULT_TIMEOUT_MS)]
        hitl_timeout_ms: u64,
        #[arg(long)]
        scenario: Vec<PathBuf>,
    },
}

#[derive(clap::Args)]
struct TableArgs {
    /// Take the risk table from this scenario file.
    #[arg(long, conflicts_with = "risk_table")]
    scenario: Option<PathBuf>,
    /// Risk table as a JSON file. Without either option the MCP case-study table is used.
    #[arg(long)]
    risk_table: Option<PathBuf>,
}

impl TableArgs {
    fn load(&self) -> Result<RiskTable> {
        let table = match (&self.scenario, &self.risk_table) {
            (Some(s), _) => Scenario::load(s)?.risk_table,
            (None, Some(t)) => {
                let text = std::fs::read_to_string(t).with_context(|| format!("reading {}", t.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", t.display()))?
            }
            (None, None) => mcp_github(PolicyMode::BeliefAware).risk_table,
        };
        table.check()?;
        Ok(table)
    }
}

fn default_log(dir: &Option<PathBuf>, name: &str) -> PathBuf {
    dir.clone()
        .unwrap_or_else(|| PathBuf::from("."))
        .join(format!("{name}.jsonl"))
}

fn print_outcomes(t: &bip_core::simlab::Transcript) {
    for (i, o) in t.outcomes.iter().enumerate() {
        println!("{i:>3}  {o}");
    }
}

fn run(
    scenario: &Path,
    mode: Option<Mode>,
    log: Option<PathBuf>,
    theta: Option<f64>,
    dir: &Option<PathBuf>,
) -> Result<u8> {
    let mut s = Scenario::load(scenario)?;
    if let Some(m) = mode {
        s.mode = m.into();
    }
    if let Some(theta) = theta {
        s.theta = theta;
    }
    let log = log.unwrap_or_else(|| default_log(dir, &s.name));
    if let Some(parent) = log.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let t = run_scenario_with(
        &s,
        RunOptions {
            log_path: Some(log.clone()),
            sink: None,
        },
    )?;
    print_outcomes(&t);
    eprintln!("log: {}", log.display());
    for f in &t.failures {
        eprintln!("expectation failed: {f}");
    }
    Ok(if t.failures.is_empty() { 0 } else { 1 })
}

fn demo(mode: DemoMode, log: Option<PathBuf>, format: Format, dir: &Option<PathBuf>) -> Result<u8> {
    let (mode, tag) = match mode {
        DemoMode::Before => (PolicyMode::BeliefBlind, "before"),
        DemoMode::After => (PolicyMode::BeliefAware, "after"),
    };
    let s = mcp_github(mode);
    let log = log.or_else(|| dir.as_ref().map(|_| default_log(dir, &format!("{}-{tag}", s.name))));
    let t = run_scenario_with(
        &s,
        RunOptions {
            log_path: log,
            sink: None,
        },
    )?;
    let rows = stage_table(&t);
    match format {
        Format::Text => print!("{}", StageTable(&rows)),
        Format::Json => println!("{}", serde_json::to_string(&rows)?),
    }
    if let Some(p) = &t.log_path {
        eprintln!("log: {}", p.display());
    }
    for f in &t.failures {
        eprintln!("expectation failed: {f}");
    }
    Ok(if t.failures.is_empty() { 0 } else { 1 })
}

fn check(log: &Path, table: &TableArgs) -> Result<u8> {
    let table = table.load()?;
    let records = read_log_file(log)?;
    let violations = check_theorem1(&records, &table);
    for v in &violations {
        println!("{}", serde_json::to_string(v)?);
    }
    Ok(if violations.is_empty() { 0 } else { 2 })
}

fn slice(log: &Path, exec: u64) -> Result<u8> {
    let records = read_log_file(log)?;
    for e in backward_slice(&records, exec)? {
        println!("{}", serde_json::to_string(&e)?);
    }
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn enumerate(
    max_len: usize,
    high_beliefs: usize,
    low_beliefs: usize,
    high_actions: usize,
    low_actions: usize,
    mode: Mode,
    no_timeout: bool,
    format: Format,
) -> Result<u8> {
    let beliefs = [vec![TrustLevel::High; high_beliefs], vec![TrustLevel::Low; low_beliefs]].concat();
    let actions = [vec![RiskClass::High; high_actions], vec![RiskClass::Low; low_actions]].concat();
    if actions.is_empty() {
        bail!("no actions: pass --high-actions and/or --low-actions");
    }
    let mut p = EnumerationParams::new(max_len, beliefs, actions, mode.into());
    p.timeouts = !no_timeout;
    let report = enumerate_traces(&p)?;
    match format {
        Format::Json => println!("{}", serde_json::to_string(&report)?),
        Format::Text => {
            println!("traces:                    {}", report.total);
            println!("violating:                 {}", report.violating);
            println!("high-risk execs:           {}", report.high_risk_execs);
            println!("  approved by a reviewer:  {}", report.high_risk_execs_via_hitl);
            println!("review timeouts:           {}", report.timeouts);
            if let Some(w) = &report.witness {
                let syms: Vec<String> = w.symbols.iter().map(|s| s.to_string()).collect();
                println!("witness: {}", syms.join(" "));
                for r in &w.log {
                    println!("  {}", r.to_line()?);
                }
            }
        }
    }
    Ok(if report.violating == 0 { 0 } else { 2 })
}

fn serve(host: std::net::IpAddr, port: u16, timeout: u64, scenarios: &[PathBuf], dir: &Option<PathBuf>) -> Result<u8> {
    let gw = Gateway::new(timeout);
    let server = Server::start(gw.clone(), (host, port))?;
    eprintln!("review gateway on {}", server.url());
    for path in scenarios {
        let s = Scenario::load(path)?;
        let log_path = dir.as_ref().map(|_| default_log(dir, &s.name));
        gw.spawn_scenario(s, RunOptions { log_path, sink: None })?;
    }
    server.wait()?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let dir = cli.log_dir;
    let result = match cli.command {
        Command::Run {
            scenario,
            mode,
            log,
            theta,
        } => run(&scenario, mode, log, theta, &dir),
        Command::Demo {
            name: Demo::McpGithub,
            mode,
            log,
            format,
        } => demo(mode, log, format, &dir),
        Command::Check { log, table } => check(&log, &table),
        Command::Slice { log, exec } => slice(&log, exec),
        Command::Enumerate {
            max_len,
            high_beliefs,
            low_beliefs,
            high_actions,
            low_actions,
            mode,
            no_timeout,
            format,
        } => enumerate(
            max_len,
            high_beliefs,
            low_beliefs,
            high_actions,
            low_actions,
            mode,
            no_timeout,
            format,
        ),
        Command::Serve {
            host,
            port,
            hitl_timeout_ms,
            scenario,
        } => serve(host, port, hitl_timeout_ms, &scenario, &dir),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
