use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, Stdio};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ftccl::balance::LoadBalance;
use ftccl::dufind::{
    render_labels, run_engine, run_engine_sockets, sequential_oracle, socket_worker, EngineOutcome,
};
use ftccl::idspace::{parse_partition_file, partition_raw_graph, read_raw_graph, Dims, GraphPartition, RankId};
use ftccl::mesh::Volume;
use ftccl::pipeline::{track_with_engine, TrackConfig, METRICS_VERSION};
use ftccl::synth::{generate, SynthSpec};
use ftccl::trajectory::{summarize, write_output, FeatureKind, OutputFormat};
use ftccl::transport::{Mode, RunMetrics, Schedule, DEFAULT_MSG_CAP};

#[derive(Parser)]
#[command(name = "ftccl", version, about = "Distributed union-find labeling and feature tracking")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic spiral-and-column volume.
    Generate(GenerateArgs),
    /// Track features of a volume through time.
    Track(TrackArgs),
    /// Label the components of a raw graph with the distributed engine.
    Ccl(CclArgs),
    /// Label the components of a raw graph sequentially.
    Oracle(OracleArgs),
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Grid extents, time first, e.g. 32x64x64.
    #[arg(long, default_value = "32x64x64")]
    dims: String,
    #[arg(long, default_value_t = 2)]
    spirals: usize,
    #[arg(long, default_value_t = 1)]
    columns: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3.0)]
    bump_width: f64,
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    /// Output prefix; writes `<prefix>.json` and `<prefix>.raw`.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureArg {
    Critical,
    Levelset,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sync,
    Async,
}

#[derive(Clone, Copy, ValueEnum)]
enum BalanceArg {
    On,
    Off,
    Auto,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Jsonl,
    Csv,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum TransportArg {
    Sim,
    Sockets,
}

#[derive(Args)]
struct EngineArgs {
    #[arg(long, default_value_t = 1)]
    ranks: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Sync)]
    mode: ModeArg,
    /// Scheduler seed for async mode.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "FTCCL_MSG_CAP", default_value_t = DEFAULT_MSG_CAP)]
    msg_cap: u64,
    #[arg(long, value_enum, default_value_t = TransportArg::Sim)]
    transport: TransportArg,
    /// Metrics JSON output path.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

impl EngineArgs {
    fn schedule(&self) -> Schedule {
        let mode = match self.mode {
            ModeArg::Sync => Mode::Sync,
            ModeArg::Async => Mode::Async,
        };
        Schedule::with_mode(mode, self.seed)
    }

    fn transport_name(&self) -> &'static str {
        match self.transport {
            TransportArg::Sim => "sim",
            TransportArg::Sockets => "sockets",
        }
    }

    fn run(&self, partition: &GraphPartition) -> ftccl::Result<EngineOutcome> {
        let schedule = self.schedule();
        match self.transport {
            TransportArg::Sim => run_engine(partition, &schedule, self.msg_cap),
            TransportArg::Sockets => run_with_workers(partition, &schedule, self.msg_cap),
        }
    }
}

#[derive(Args)]
struct TrackArgs {
    /// Volume path (`<prefix>`, `<prefix>.json` or `<prefix>.raw`).
    #[arg(long)]
    input: PathBuf,
    /// Trajectory output file.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum)]
    feature: FeatureArg,
    /// Level-set threshold; values strictly above it are features.
    #[arg(long)]
    threshold: Option<f32>,
    #[arg(long, value_enum, default_value_t = BalanceArg::Off)]
    load_balance: BalanceArg,
    #[arg(long, value_enum, default_value_t = FormatArg::Jsonl)]
    format: FormatArg,
    /// Component summary JSON output path.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// kd assignment dump, written when balancing runs.
    #[arg(long)]
    assignment: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct CclArgs {
    /// Raw graph: `a b` edge lines, single-id element lines, `#` comments.
    #[arg(long)]
    graph: PathBuf,
    /// Optional `element rank` lines; defaults to contiguous id ranges.
    #[arg(long)]
    partition: Option<PathBuf>,
    /// Label file output.
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long)]
    connect: SocketAddr,
    #[arg(long)]
    rank: u32,
}

/// Children are killed unless they all exit cleanly.
struct Workers(Vec<Child>);

impl Workers {
    fn wait_all(mut self) -> ftccl::Result<()> {
        for (r, mut child) in std::mem::take(&mut self.0).into_iter().enumerate() {
            let status = child
                .wait()
                .map_err(|e| ftccl::Error::Transport(format!("waiting for worker {r}: {e}")))?;
            if !status.success() {
                return Err(ftccl::Error::Transport(format!("worker {r} exited with {status}")));
            }
        }
        Ok(())
    }
}

impl Drop for Workers {
    fn drop(&mut self) {
        for child in &mut self.0 {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn run_with_workers(
    partition: &GraphPartition,
    schedule: &Schedule,
    msg_cap: u64,
) -> ftccl::Result<EngineOutcome> {
    let exe = std::env::current_exe().map_err(|e| ftccl::Error::Transport(e.to_string()))?;
    let mut workers = Workers(Vec::new());
    let outcome = run_engine_sockets(partition, schedule, msg_cap, |addr, rank| {
        let child = Command::new(&exe)
            .args(["worker", "--connect", &addr.to_string(), "--rank", &rank.0.to_string()])
            .stdin(Stdio::null())
            .spawn()
            .map_err(|e| ftccl::Error::Transport(format!("spawning worker {rank}: {e}")))?;
        workers.0.push(child);
        Ok(())
    })?;
    workers.wait_all()?;
    Ok(outcome)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let spec = SynthSpec {
        dims: Dims::parse(&a.dims)?,
        seed: a.seed,
        n_spirals: a.spirals,
        n_columns: a.columns,
        bump_width: a.bump_width,
        amplitude: a.amplitude,
        noise: a.noise,
    };
    generate(&spec)?.write(&a.output)?;
    Ok(())
}

fn cmd_track(a: &TrackArgs) -> Result<()> {
    let kind = match a.feature {
        FeatureArg::Critical => FeatureKind::Critical,
        FeatureArg::Levelset => FeatureKind::Levelset,
    };
    let start = Instant::now();
    let vol = Volume::read(&a.input)?;
    let read_seconds = start.elapsed().as_secs_f64();
    let cfg = TrackConfig {
        kind,
        threshold: a.threshold,
        num_ranks: a.engine.ranks,
        schedule: a.engine.schedule(),
        load_balance: match a.load_balance {
            BalanceArg::On => LoadBalance::On,
            BalanceArg::Off => LoadBalance::Off,
            BalanceArg::Auto => LoadBalance::Auto,
        },
        msg_cap: a.engine.msg_cap,
    };
    let mut out = track_with_engine(&vol, &cfg, |p| a.engine.run(p))?;
    let format = match a.format {
        FormatArg::Jsonl => OutputFormat::Jsonl,
        FormatArg::Csv => OutputFormat::Csv,
    };
    let start = Instant::now();
    write_output(&out.trajectories, &a.output, format)?;
    out.metrics.stage_seconds.insert("read", read_seconds);
    out.metrics.stage_seconds.insert("write", start.elapsed().as_secs_f64());
    if let Some(path) = &a.summary {
        write_json(path, &summarize(&out.trajectories))?;
    }
    if let (Some(path), Some(kd)) = (&a.assignment, &out.assignment) {
        std::fs::write(path, kd.to_json()? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &a.engine.metrics {
        #[derive(Serialize)]
        struct TrackReport<'a> {
            #[serde(flatten)]
            metrics: &'a ftccl::pipeline::TrackMetrics,
            transport: &'static str,
        }
        write_json(
            path,
            &TrackReport {
                metrics: &out.metrics,
                transport: a.engine.transport_name(),
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct GraphStats {
    n_elements: usize,
    n_edges: usize,
    avg_degree: f64,
}

#[derive(Serialize)]
struct CclMetrics<'a> {
    metrics_version: u32,
    command: &'static str,
    num_ranks: usize,
    transport: &'static str,
    stage_seconds: BTreeMap<&'static str, f64>,
    dataset: GraphStats,
    n_components: usize,
    engine: &'a RunMetrics,
}

fn cmd_ccl(a: &CclArgs) -> Result<()> {
    let mut stages = BTreeMap::new();
    let mut clock = Instant::now();
    let graph = read_raw_graph(&a.graph)?;
    let explicit = match &a.partition {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            Some(parse_partition_file(&text, a.engine.ranks)?)
        }
        None => None,
    };
    stages.insert("read", clock.elapsed().as_secs_f64());
    clock = Instant::now();
    let partition = partition_raw_graph(&graph, a.engine.ranks, explicit.as_ref())?;
    stages.insert("partition", clock.elapsed().as_secs_f64());
    clock = Instant::now();
    let outcome = a.engine.run(&partition)?;
    stages.insert("engine", clock.elapsed().as_secs_f64());
    clock = Instant::now();
    std::fs::write(&a.output, render_labels(&outcome.labels))
        .with_context(|| format!("writing {}", a.output.display()))?;
    stages.insert("write", clock.elapsed().as_secs_f64());
    if let Some(path) = &a.engine.metrics {
        let n_elements = partition.num_elements();
        let n_edges = partition.num_edges();
        let n_components = outcome.labels.iter().filter(|(e, r)| e == r).count();
        write_json(
            path,
            &CclMetrics {
                metrics_version: METRICS_VERSION,
                command: "ccl",
                num_ranks: a.engine.ranks,
                transport: a.engine.transport_name(),
                stage_seconds: stages,
                dataset: GraphStats {
                    n_elements,
                    n_edges,
                    avg_degree: if n_elements == 0 {
                        0.0
                    } else {
                        2.0 * n_edges as f64 / n_elements as f64
                    },
                },
                n_components,
                engine: &outcome.metrics,
            },
        )?;
    }
    Ok(())
}

fn cmd_oracle(a: &OracleArgs) -> Result<()> {
    let graph = read_raw_graph(&a.graph)?;
    let labels = sequential_oracle(&graph.elements, &graph.edges);
    std::fs::write(&a.output, render_labels(&labels))
        .with_context(|| format!("writing {}", a.output.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Generate(a) => cmd_generate(&a),
        Cmd::Track(a) => cmd_track(&a),
        Cmd::Ccl(a) => cmd_ccl(&a),
        Cmd::Oracle(a) => cmd_oracle(&a),
        Cmd::Worker(a) => {
            socket_worker(a.connect, RankId(a.rank))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Cmd::Track(a) = &cli.command {
        if matches!(a.feature, FeatureArg::Levelset) && a.threshold.is_none() {
            eprintln!("error: --threshold is required with --feature levelset");
            return ExitCode::from(2);
        }
        if matches!(a.feature, FeatureArg::Critical) && a.threshold.is_some() {
            eprintln!("error: --threshold only applies to --feature levelset");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ftccl::Error>().is_some_and(|e| {
                matches!(e, ftccl::Error::AuditFailed(_) | ftccl::Error::ProtocolViolation(_))
            }) {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
