//! Command implementations behind the `lordo` binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use lordo::config::{QhmConfig, RunConfig, SyncSchedule};
use lordo::costs::{self, CostInputs, EfLayout, Method};
use lordo::distsim::{Execution, Simulator, StepRecord};
use lordo::{ProjectionStrategy, QhmMode};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "lordo", version, about = "Distributed low-rank optimizer simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write its step log.
    Run(RunArgs),
    /// Run a base config across values of one axis.
    Sweep(SweepArgs),
    /// Print communication and memory costs.
    Costs(CostsArgs),
    /// Summarize a step log.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; defaults to the number of workers.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overrides `master_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    Rank,
    K,
    #[value(alias = "batch_and_workers")]
    BatchAndWorkers,
    Omega,
    Sparsity,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for per-point logs and `summary.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated axis values. For `batch-and-workers` these are worker
    /// counts; the per-worker batch is `global_batch / M`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// Global batch for `batch-and-workers`; defaults to the base `M·B`.
    #[arg(long)]
    pub global_batch: Option<usize>,
    /// Sweep points run concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CostsArgs {
    #[arg(long)]
    pub p: u64,
    #[arg(long)]
    pub q: u64,
    #[arg(long)]
    pub r: u64,
    /// Sets all three periods at once.
    #[arg(long, required_unless_present_all = ["kx", "ku", "kv"])]
    pub k: Option<u64>,
    #[arg(long)]
    pub kx: Option<u64>,
    #[arg(long)]
    pub ku: Option<u64>,
    #[arg(long)]
    pub kv: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub log: PathBuf,
}

/// How a command finished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    Diverged,
}

/// One line of a step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Header { version: String, config: RunConfig },
    Step(StepRecord),
}

pub fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = RunConfig::from_toml_str(&text).with_context(|| format!("in {}", path.display()))?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    Ok(cfg)
}

fn execution(threads: Option<usize>, workers: usize) -> Execution {
    match threads.unwrap_or(workers) {
        0 | 1 => Execution::Serial,
        n => Execution::Parallel { threads: n },
    }
}

/// Final numbers of a finished run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub final_loss: f64,
    pub final_mean_loss: f64,
    pub steps_run: u64,
    pub diverged: bool,
}

/// Runs `cfg` and streams its log to `out`.
pub fn execute(cfg: &RunConfig, exec: Execution, out: &Path) -> anyhow::Result<RunSummary> {
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = BufWriter::new(file);
    let header = LogLine::Header {
        version: VERSION.to_string(),
        config: cfg.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut summary = RunSummary {
        final_loss: f64::NAN,
        final_mean_loss: f64::NAN,
        steps_run: 0,
        diverged: false,
    };
    for rec in Simulator::new(cfg.clone(), exec)? {
        let rec = rec?;
        summary.final_loss = rec.global_loss;
        summary.final_mean_loss = rec.mean_loss;
        summary.steps_run = rec.step + 1;
        summary.diverged |= rec.diverged;
        serde_json::to_writer(&mut w, &LogLine::Step(rec))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(summary)
}

pub fn cmd_run(args: &RunArgs) -> anyhow::Result<Outcome> {
    let cfg = load_config(&args.config, args.seed)?;
    let summary = execute(&cfg, execution(args.threads, cfg.workers), &args.out)?;
    if summary.diverged {
        eprintln!("run diverged after {} steps", summary.steps_run);
        Ok(Outcome::Diverged)
    } else {
        println!("final loss {:.6e} after {} steps", summary.final_loss, summary.steps_run);
        Ok(Outcome::Completed)
    }
}

/// Base config with one axis value applied, validated.
pub fn sweep_point(base: &RunConfig, axis: SweepAxis, value: &str, global_batch: usize) -> anyhow::Result<RunConfig> {
    let mut cfg = base.clone();
    let int = || value.parse::<u64>().with_context(|| format!("`{value}` is not a non-negative integer"));
    let float = || value.parse::<f64>().with_context(|| format!("`{value}` is not a number"));
    match axis {
        SweepAxis::Rank => cfg.rank = int()? as usize,
        SweepAxis::K => cfg.schedule = SyncSchedule::uniform(int()?),
        SweepAxis::BatchAndWorkers => {
            let m = int()? as usize;
            if m == 0 || !global_batch.is_multiple_of(m) {
                bail!("global batch {global_batch} is not divisible by M = {m}");
            }
            cfg.workers = m;
            cfg.batch_size = global_batch / m;
        }
        SweepAxis::Omega => {
            let omega = float()?;
            cfg.qhm = match cfg.qhm {
                QhmConfig::LowRank { .. } => QhmConfig::LowRank { omega },
                QhmConfig::FullRank { .. } => QhmConfig::FullRank { omega },
                QhmConfig::None {} => bail!("omega sweep needs a QHM mode in the base config"),
            };
        }
        SweepAxis::Sparsity => cfg.flags.sparsify_keep = float()?,
    }
    cfg.validate().with_context(|| format!("sweep point {value}"))?;
    Ok(cfg)
}

pub fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<Outcome> {
    let base = load_config(&args.config, args.seed)?;
    let global_batch = args.global_batch.unwrap_or(base.workers * base.batch_size);
    // validate every point before running any
    let points = args
        .values
        .iter()
        .map(|v| Ok((v.clone(), sweep_point(&base, args.axis, v, global_batch)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let axis_name = args.axis.to_possible_value().expect("named axis").get_name().to_string();

    let run_point = |(value, cfg): &(String, RunConfig)| -> anyhow::Result<(String, RunSummary, PathBuf)> {
        let log = args.out.join(format!("{axis_name}_{value}.jsonl"));
        let summary = execute(cfg, execution(args.threads, cfg.workers), &log)?;
        Ok((value.clone(), summary, log))
    };
    let results: Vec<_> = if args.parallel > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(args.parallel)
            .build()?
            .install(|| points.par_iter().map(run_point).collect())
    } else {
        points.iter().map(run_point).collect()
    };

    let mut csv = String::from("axis,value,final_loss,final_mean_loss,diverged,steps_run,log\n");
    let mut any_diverged = false;
    for r in results {
        let (value, s, log) = r?;
        any_diverged |= s.diverged;
        let name = log.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        writeln!(
            csv,
            "{axis_name},{value},{:e},{:e},{},{},{name}",
            s.final_loss, s.final_mean_loss, s.diverged, s.steps_run
        )?;
    }
    fs::write(args.out.join("summary.csv"), &csv)?;
    print!("{csv}");
    Ok(if any_diverged { Outcome::Diverged } else { Outcome::Completed })
}

pub fn cost_inputs(args: &CostsArgs) -> anyhow::Result<CostInputs> {
    let pick = |specific: Option<u64>, name: &str| {
        specific
            .or(args.k)
            .with_context(|| format!("missing --{name} (or --k)"))
    };
    let inputs = CostInputs {
        k_x: pick(args.kx, "kx")?,
        k_u: pick(args.ku, "ku")?,
        k_v: pick(args.kv, "kv")?,
        ..CostInputs::new(args.p, args.q, args.r, 1)
    };
    inputs.validate()?;
    if inputs.r == 0 {
        bail!("r must be at least 1");
    }
    Ok(inputs)
}

/// Renders the cost table for a set of inputs.
pub fn render_costs(inputs: &CostInputs) -> anyhow::Result<String> {
    let variants: [(&str, Method); 6] = [
        ("lordo-global", Method::Lordo { strategy: ProjectionStrategy::Global, qhm: QhmMode::NoQhm }),
        ("lordo-global-fullqhm", Method::Lordo { strategy: ProjectionStrategy::Global, qhm: QhmMode::FullRank }),
        ("lordo-local", Method::Lordo { strategy: ProjectionStrategy::Local, qhm: QhmMode::NoQhm }),
        ("lordo-local-fullqhm", Method::Lordo { strategy: ProjectionStrategy::Local, qhm: QhmMode::FullRank }),
        ("local-adam", Method::LocalAdam),
        ("ddp", Method::Ddp),
    ];
    let mut out = String::new();
    writeln!(
        out,
        "p={} q={} r={} K_x={} K_u={} K_v={}  (counts in scalars)",
        inputs.p, inputs.q, inputs.r, inputs.k_x, inputs.k_u, inputs.k_v
    )?;
    writeln!(out, "{:<22}{:>14}{:>14}{:>14}", "variant", "uplink/sync", "downlink/sync", "memory")?;
    for (name, method) in variants {
        let c = costs::per_payload(method, inputs)?;
        let mem = costs::memory_overhead(method, EfLayout::SeparateBuffer, false, inputs)?;
        writeln!(out, "{name:<22}{:>14}{:>14}{:>14}", c.uplink.total(), c.downlink.total(), mem)?;
    }
    let ratios = [
        ("reduction vs low-rank DDP", costs::reduction_vs_lowrank_ddp(inputs)?),
        ("reduction vs full-rank DDP", costs::reduction_vs_fullrank_ddp(inputs)?),
        ("reduction vs full-rank local (local)", costs::reduction_vs_fullrank_local(inputs, ProjectionStrategy::Local)?),
        ("reduction vs full-rank local (global)", costs::reduction_vs_fullrank_local(inputs, ProjectionStrategy::Global)?),
        ("optimizer state p/r", costs::state_reduction(inputs)?),
    ];
    for (name, value) in ratios {
        let flag = if value <= 1.0 { "  [no saving]" } else { "" };
        writeln!(out, "{name:<40}{value:>10.2}{flag}")?;
    }
    Ok(out)
}

pub fn cmd_costs(args: &CostsArgs) -> anyhow::Result<Outcome> {
    print!("{}", render_costs(&cost_inputs(args)?)?);
    Ok(Outcome::Completed)
}

/// Post-hoc statistics of a step log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogAnalysis {
    pub steps: u64,
    pub final_loss: f64,
    pub diverged: bool,
    /// layer → (mean MSSV, number of updates)
    pub mean_mssv: BTreeMap<usize, (f64, usize)>,
    pub stable_rank: Option<(f64, f64)>,
    pub mean_sin_theta: Option<f64>,
}

pub fn analyze_reader(reader: impl BufRead) -> anyhow::Result<LogAnalysis> {
    let mut analysis = LogAnalysis {
        steps: 0,
        final_loss: f64::NAN,
        diverged: false,
        mean_mssv: BTreeMap::new(),
        stable_rank: None,
        mean_sin_theta: None,
    };
    let mut saw_header = false;
    let mut mssv: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let (mut sin_sum, mut sin_n) = (0.0, 0usize);
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.with_context(|| format!("line {lineno}: unreadable"))?;
        let parsed: LogLine =
            serde_json::from_str(&line).with_context(|| format!("line {lineno}: malformed record"))?;
        match parsed {
            LogLine::Header { .. } if lineno == 1 => saw_header = true,
            LogLine::Header { .. } => bail!("line {lineno}: unexpected second header"),
            LogLine::Step(_) if !saw_header => bail!("line {lineno}: missing header"),
            LogLine::Step(rec) => {
                analysis.steps += 1;
                analysis.final_loss = rec.global_loss;
                analysis.diverged |= rec.diverged;
                for u in &rec.projection_updates {
                    let e = mssv.entry(u.layer).or_default();
                    e.0 += u.metrics.mssv;
                    e.1 += 1;
                    sin_sum += u.metrics.sin_theta;
                    sin_n += 1;
                    let sr = u.metrics.stable_rank;
                    analysis.stable_rank = Some(match analysis.stable_rank {
                        None => (sr, sr),
                        Some((lo, hi)) => (lo.min(sr), hi.max(sr)),
                    });
                }
            }
        }
    }
    if !saw_header {
        bail!("empty log");
    }
    analysis.mean_mssv = mssv.into_iter().map(|(l, (s, n))| (l, (s / n as f64, n))).collect();
    analysis.mean_sin_theta = (sin_n > 0).then(|| sin_sum / sin_n as f64);
    Ok(analysis)
}

pub fn render_analysis(a: &LogAnalysis) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "steps: {}", a.steps);
    let _ = writeln!(out, "final loss: {:.6e}", a.final_loss);
    let _ = writeln!(out, "diverged: {}", a.diverged);
    if a.mean_mssv.is_empty() {
        let _ = writeln!(out, "projection updates: none");
    }
    for (layer, (m, n)) in &a.mean_mssv {
        let _ = writeln!(out, "layer {layer} mean MSSV: {m:.6} over {n} updates");
    }
    if let Some(s) = a.mean_sin_theta {
        let _ = writeln!(out, "mean sin theta: {s:.6e}");
    }
    if let Some((lo, hi)) = a.stable_rank {
        let _ = writeln!(out, "stable rank: min {lo:.4} max {hi:.4}");
    }
    out
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> anyhow::Result<Outcome> {
    let file = File::open(&args.log).with_context(|| format!("opening {}", args.log.display()))?;
    let a = analyze_reader(BufReader::new(file))?;
    print!("{}", render_analysis(&a));
    Ok(Outcome::Completed)
}

pub fn dispatch(cli: &Cli) -> anyhow::Result<Outcome> {
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Costs(a) => cmd_costs(a),
        Command::Analyze(a) => cmd_analyze(a),
    }
}
