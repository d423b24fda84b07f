use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use weips_core::harness::cluster::Cluster;
use weips_core::harness::config::ClusterConfig;
use weips_core::harness::faults::FaultPlan;
use weips_core::harness::freshness::FreshnessStats;
use weips_core::harness::process::{serve_node, NodeRole};
use weips_core::harness::report::{load_artifacts, summary, write_report};
use weips_core::harness::run::{run_on, RunArtifacts, RunOptions};
use weips_core::master::{CheckpointDest, GatherConfig};
use weips_core::wire::tcp::TcpServer;
use weips_core::wire::{Directory, Service};
use weips_core::{Error, Result};

#[derive(Parser)]
#[command(name = "weips", version, about = "Fused online-learning parameter server harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Start a cluster from a config file, train on the synthetic workload and report.
    Run(RunArgs),
    /// Measure update-to-visible latency under REALTIME, THRESHOLD and PERIOD gather.
    BenchFreshness(BenchArgs),
    /// Run a fault plan against a cluster.
    Inject(InjectArgs),
    /// Operator commands against a running cluster's scheduler.
    Admin(AdminArgs),
    /// Re-render CSVs and the summary of a finished run.
    Report(ReportArgs),
    /// Serve one shard over TCP; started by multi-process clusters.
    #[command(hide = true)]
    Node(NodeArgs),
}

#[derive(Args)]
struct Common {
    /// Write the report here instead of `<run dir>/report`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override `trainer.samples`.
    #[arg(long)]
    samples: Option<u64>,
    /// Serve the scheduler's admin endpoint on this address.
    #[arg(long)]
    admin_listen: Option<String>,
    /// Keep the cluster and admin endpoint up after training until stdin closes.
    #[arg(long)]
    serve: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Also probe freshness while training.
    #[arg(long)]
    freshness: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BenchArgs {
    /// Base config; defaults to an in-process 1/1/1 topology.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Gather modes: realtime, threshold:<count>, period:<ms>.
    #[arg(long, value_delimiter = ',', default_value = "realtime,threshold:1000,period:10000")]
    modes: Vec<String>,
    #[arg(long)]
    probes: Option<usize>,
    /// Background training rate, samples per second.
    #[arg(long, default_value_t = 20_000)]
    rate: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InjectArgs {
    #[arg(long)]
    plan: PathBuf,
    /// Cluster config; defaults to the plan's `config` entry.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct AdminArgs {
    /// Scheduler admin endpoint, e.g. tcp:127.0.0.1:7070.
    #[arg(long, env = "WEIPS_ADMIN")]
    endpoint: String,
    #[command(subcommand)]
    cmd: AdminCmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dest {
    Local,
    RemoteSim,
}

#[derive(Subcommand)]
enum AdminCmd {
    /// Make a checkpointed version the serving version.
    SwitchVersion { model: String, version: u64 },
    /// Checkpoint every master shard as a new version.
    Checkpoint {
        model: String,
        #[arg(long, value_enum, default_value = "local")]
        dest: Dest,
    },
    /// Print the shard map.
    Status { model: String },
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    out: PathBuf,
    /// run.json (or its directory) to render; defaults to `<out>/run.json`.
    #[arg(long)]
    run: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Master,
    Slave,
}

#[derive(Args)]
struct NodeArgs {
    #[arg(value_enum)]
    role: Role,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    shard: u32,
    #[arg(long, default_value_t = 0)]
    replica: u32,
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Run(a) => {
            let cfg = ClusterConfig::load(&a.config)?;
            let opts = RunOptions {
                freshness: a.freshness,
                ..RunOptions::default()
            };
            experiment(cfg, opts, &a.common)
        }
        Cmd::Inject(a) => {
            let plan = FaultPlan::load(&a.plan)?;
            let path = a
                .config
                .or_else(|| plan.config.clone())
                .ok_or_else(|| Error::Config("no cluster config: pass --config or set `config` in the plan".into()))?;
            let cfg = ClusterConfig::load(&path)?;
            plan.validate(&cfg)?;
            let opts = RunOptions {
                plan: Some(plan),
                ..RunOptions::default()
            };
            experiment(cfg, opts, &a.common)
        }
        Cmd::BenchFreshness(a) => bench_freshness(a),
        Cmd::Admin(a) => admin(a),
        Cmd::Report(a) => {
            let from = a.run.unwrap_or_else(|| a.out.clone());
            let artifacts = load_artifacts(&from)?;
            write_report(&artifacts, &a.out)?;
            print!("{}", summary(&artifacts));
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Node(a) => {
            let cfg = ClusterConfig::load(&a.config)?;
            let role = match a.role {
                Role::Master => NodeRole::Master,
                Role::Slave => NodeRole::Slave,
            };
            serve_node(&cfg, &a.run_dir, role, a.shard, a.replica, &a.listen)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn node_exe() -> Option<PathBuf> {
    std::env::current_exe().ok()
}

fn experiment(mut cfg: ClusterConfig, mut opts: RunOptions, common: &Common) -> Result<ExitCode> {
    if let Some(n) = common.samples {
        cfg.trainer.samples = n;
    }
    opts.node_exe = node_exe();
    cfg.validate()?;
    let cluster = Cluster::start(cfg, opts.node_exe.as_deref())?;
    eprintln!("run dir {}", cluster.run_dir.display());
    let _admin = match &common.admin_listen {
        Some(addr) => {
            let svc: Arc<dyn Service> = cluster.scheduler.clone();
            let server = TcpServer::bind(addr, svc)?;
            println!("ADMIN {}", server.endpoint());
            Some(server)
        }
        None => None,
    };
    let artifacts = run_on(&cluster, &opts)?;
    let out = common.out.clone().unwrap_or_else(|| cluster.run_dir.join("report"));
    finish(&artifacts, &out)?;
    if common.serve {
        eprintln!("serving until stdin closes");
        let mut sink = Vec::new();
        let _ = std::io::stdin().read_to_end(&mut sink);
    }
    cluster.shutdown();
    let consistent = artifacts.consistency.as_ref().is_none_or(|c| c.passed());
    Ok(if consistent { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn finish(artifacts: &RunArtifacts, out: &Path) -> Result<()> {
    write_report(artifacts, out)?;
    print!("{}", summary(artifacts));
    println!("report written to {}", out.display());
    Ok(())
}

fn parse_mode(s: &str) -> Result<GatherConfig> {
    let bad = || Error::Config(format!("bad gather mode {s:?}; use realtime, threshold:<n> or period:<ms>"));
    let mode = match s.split_once(':') {
        None if s == "realtime" => GatherConfig::Realtime,
        Some(("threshold", n)) => GatherConfig::Threshold {
            threshold_count: n.parse().map_err(|_| bad())?,
        },
        Some(("period", ms)) => GatherConfig::Period {
            period_ms: ms.parse().map_err(|_| bad())?,
        },
        _ => return Err(bad()),
    };
    mode.validate()?;
    Ok(mode)
}

fn bench_freshness(a: BenchArgs) -> Result<ExitCode> {
    let mut base = match &a.config {
        Some(p) => ClusterConfig::load(p)?,
        None => ClusterConfig::default(),
    };
    base.workload.samples_per_second = a.rate;
    if let Some(n) = a.probes {
        base.freshness.probes = n;
    }
    let modes = a.modes.iter().map(|m| parse_mode(m)).collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<FreshnessStats> = Vec::new();
    for mode in modes {
        let cfg = base.clone().with_gather(mode);
        let cluster = Cluster::start(cfg, node_exe().as_deref())?;
        let opts = RunOptions {
            freshness: true,
            check_consistency: false,
            ..RunOptions::default()
        };
        let artifacts = run_on(&cluster, &opts)?;
        cluster.shutdown();
        let out = a
            .out
            .clone()
            .unwrap_or_else(|| cluster.run_dir.join("report"))
            .join(mode.label());
        write_report(&artifacts, &out)?;
        let f = artifacts.freshness.expect("freshness was requested");
        println!(
            "{:<18} probes {:>5} timeouts {:>3}  p50 {:>10.2} ms  p99 {:>10.2} ms  max {:>10.2} ms",
            f.label, f.probes, f.timeouts, f.p50_ms, f.p99_ms, f.max_ms
        );
        rows.push(f);
    }
    let ordered = rows.windows(2).all(|w| w[0].p50_ms < w[1].p50_ms);
    println!("p50 ordering {}", if ordered { "increasing" } else { "NOT increasing" });
    Ok(ExitCode::SUCCESS)
}

fn admin(a: AdminArgs) -> Result<ExitCode> {
    let dir = Directory::new();
    let client = dir.client(&a.endpoint)?;
    match a.cmd {
        AdminCmd::SwitchVersion { model, version } => {
            let v = client.switch_version(&model, version)?;
            println!("{model}: serving v{v}");
        }
        AdminCmd::Checkpoint { model, dest } => {
            let dest = match dest {
                Dest::Local => CheckpointDest::Local,
                Dest::RemoteSim => CheckpointDest::RemoteSim,
            };
            let (v, metas) = client.trigger_ckpt(&model, dest)?;
            let params: u64 = metas.iter().map(|m| m.param_count).sum();
            println!("{model}: checkpoint v{v}, {} shards, {params} params", metas.len());
        }
        AdminCmd::Status { model } => {
            let map = client.status(&model)?;
            println!("{}", serde_json::to_string_pretty(&map)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}
