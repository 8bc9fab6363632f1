use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use shufflekit::shuffle::Variant;
use shufflekit::sortbench::{self, KillAt, RunConfig};

#[derive(Parser)]
#[command(
    name = "sortbench",
    version,
    about = "Distributed sort benchmark on the shufflekit runtime"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate input, shuffle it, validate the output and report.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_size: Option<u64>,
    /// Number of input partitions (M); the partition size is derived.
    #[arg(long)]
    partitions: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    slots: Option<usize>,
    /// Per-node object store memory, in bytes.
    #[arg(long)]
    memory_limit: Option<u64>,
    #[arg(long)]
    fuse_threshold: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Kill a node once a fraction of tasks finished, e.g. `1@0.3`.
    #[arg(long, value_name = "ID@FRACTION")]
    kill_node: Option<KillAt>,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the scheduler trace (JSON lines) here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

impl RunArgs {
    fn to_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(d) = self.data_size {
            cfg.data_size = d;
        }
        if let Some(m) = self.partitions {
            anyhow::ensure!(m > 0, "--partitions must be positive");
            cfg.partition_size = cfg.data_size.div_ceil(m);
            cfg.shuffle.m = 0;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(n) = self.nodes {
            cfg.cluster.nodes = n;
        }
        if let Some(s) = self.slots {
            cfg.cluster.slots_per_node = s;
        }
        if let Some(m) = self.memory_limit {
            cfg.cluster.store.memory_limit = m;
        }
        if let Some(f) = self.fuse_threshold {
            cfg.cluster.store.fuse_threshold = f;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.kill_node.is_some() {
            cfg.kill_node = self.kill_node;
        }
        if self.report.is_some() {
            cfg.output.clone_from(&self.report);
        }
        if self.trace.is_some() {
            cfg.trace.clone_from(&self.trace);
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let Command::Run(args) = cli.command;
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(args: &RunArgs) -> Result<bool> {
    let cfg = args.to_config()?;
    let report = sortbench::run(&cfg)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.summary_table());
    }
    if let Err(e) = report.validation.check() {
        eprintln!("validation failed: {e}");
        return Ok(false);
    }
    Ok(true)
}
