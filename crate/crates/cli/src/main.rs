use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use multigrid::accounting::{self, PlanSummary};
use multigrid::clipbin;
use multigrid::nn::checkpoint;
use multigrid::sampling_grid::{self, GridSpec};
use multigrid::schedule::{self, PlanConfig};
use multigrid::synth::SynthDataset;
use multigrid::trainer::{self, EvalConfig, RunConfig};

#[derive(Parser)]
#[command(name = "multigrid", version, about = "Multigrid training schedules for video models")]
struct Cli {
    /// Worker threads for data-parallel kernels (0 = all cores).
    #[arg(long, global = true, env = "MULTIGRID_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile a plan config into per-iteration records.
    Plan(PlanArgs),
    /// Train on the synthetic dataset following a compiled plan.
    Train(TrainArgs),
    /// Multi-clip evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Resample a CLIPBIN clip on a grid.
    Resample(ResampleArgs),
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    config: PathBuf,
    /// Plan records as JSON Lines.
    #[arg(long)]
    out: PathBuf,
    /// Write the accounting summary as JSON.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Compare against this plan config instead of the recipe's own baseline.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Write the summary (and the baseline's) as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (plan, model, data, train settings).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for metrics, checkpoints and the report.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Record wall-clock time in the metrics (output is then not reproducible).
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run config the checkpoint was trained with.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clips per video.
    #[arg(long, default_value_t = 10)]
    clips: usize,
    /// Write the result as JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ResampleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Grid as JSON; the identity grid when omitted.
    #[arg(long)]
    grid: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    set_threads(cli.threads)?;
    match cli.cmd {
        Cmd::Plan(a) => cmd_plan(&a),
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Eval(a) => cmd_eval(&a),
        Cmd::Resample(a) => cmd_resample(&a),
    }
}

#[cfg(feature = "parallel")]
fn set_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("starting the thread pool")
}

#[cfg(not(feature = "parallel"))]
fn set_threads(_: usize) -> Result<()> {
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn load_plan(path: &Path) -> Result<PlanConfig> {
    PlanConfig::load(path).with_context(|| format!("reading plan config {}", path.display()))
}

fn load_run(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("reading run config {}", path.display()))
}

fn cmd_plan(a: &PlanArgs) -> Result<()> {
    let cfg = load_plan(&a.config)?;
    let plan = schedule::compile(&cfg)?;
    let mut w = create(&a.out)?;
    schedule::write_jsonl(&mut w, &plan)?;
    w.flush()?;

    let (summary, baseline): (PlanSummary, Option<PlanSummary>) = match &a.baseline {
        Some(path) => {
            let base = schedule::compile(&load_plan(path)?)?;
            (accounting::summarize(&plan, &base)?, Some(base.summary))
        }
        None => (plan.summary.clone(), None),
    };
    if let Some(path) = &a.summary {
        write_json(path, &summary)?;
    }
    if let Some(path) = &a.csv {
        let mut rows = vec![("plan", &summary)];
        if let Some(b) = &baseline {
            rows.push(("baseline", b));
        }
        let mut w = create(path)?;
        accounting::write_csv(&mut w, &rows)?;
        w.flush()?;
    }
    println!(
        "{} iterations, {:.1} epochs, iteration ratio {:.3}, FLOPs ratio {:.3}",
        summary.total_iters, summary.epochs, summary.iteration_ratio_vs_baseline, summary.flops_proxy_ratio
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_run(&a.config)?;
    cfg.train.wall_clock |= a.wall_clock;
    let plan = schedule::compile(&cfg.plan)?;
    let data = SynthDataset::generate(&cfg.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let outcome = match &a.resume {
        Some(path) => {
            let ck = checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
            if ck.seed != a.seed {
                bail!("checkpoint was written with --seed {}, not {}", ck.seed, a.seed);
            }
            if ck.params.config != cfg.model {
                bail!("checkpoint model does not match `model` in {}", a.config.display());
            }
            trainer::resume(&plan, &data, ck, &cfg.train, Some(&a.out))?
        }
        None => trainer::train(&plan, &cfg.model, &data, a.seed, &cfg.train, Some(&a.out))?,
    };

    let mut w = create(&a.out.join("metrics.jsonl"))?;
    trainer::write_metrics(&mut w, &outcome.metrics)?;
    w.flush()?;

    let eval = match &cfg.val {
        Some(spec) => {
            let val = SynthDataset::generate(spec)?;
            let ec = EvalConfig::for_plan(&cfg.plan, cfg.eval_clips);
            Some(trainer::evaluate(&outcome.params, &val, &ec)?)
        }
        None => None,
    };
    let report = trainer::RunReport {
        iterations: plan.len(),
        clips: plan.total_clips(),
        flops_proxy: plan.summary.flops_proxy,
        final_loss: outcome.metrics.last().map_or(f64::NAN, |m| m.loss),
        eval,
    };
    write_json(&a.out.join("report.json"), &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = load_run(&a.config)?;
    let ck = checkpoint::load(&a.checkpoint).with_context(|| format!("reading checkpoint {}", a.checkpoint.display()))?;
    let spec = cfg.val.as_ref().unwrap_or(&cfg.data);
    let data = SynthDataset::generate(spec)?;
    let result = trainer::evaluate(&ck.params, &data, &EvalConfig::for_plan(&cfg.plan, a.clips))?;
    if let Some(path) = &a.out {
        write_json(path, &result)?;
    }
    println!("{}", serde_json::to_string(&result)?);
    Ok(())
}

fn cmd_resample(a: &ResampleArgs) -> Result<()> {
    let clip = clipbin::load(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let grid: GridSpec = match &a.grid {
        Some(path) => serde_json::from_str(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
            .with_context(|| format!("parsing grid {}", path.display()))?,
        None => GridSpec::identity(clip.frames, clip.height, clip.width),
    };
    let out = sampling_grid::resample(&clip, &grid)?;
    clipbin::save(&a.output, &out)?;
    let (t, h, w, c) = out.dims();
    println!("{t}x{h}x{w}x{c}");
    Ok(())
}
