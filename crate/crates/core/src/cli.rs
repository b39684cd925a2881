//! Command-line entry points. Exit codes: 0 success, 1 usage or
//! configuration error, 2 runtime failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{RunConfig, DEFAULT_EVAL_SEED};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_embeddings};
use crate::meta::{Model, ModelKind};
use crate::tasks::{ModeSet, RngStream, TaskDistribution};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mmaml", version, about = "Multimodal meta-learning for few-shot regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Meta-train a model and write metrics and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on fresh tasks.
    Eval(EvalArgs),
    /// Write task embeddings of a checkpoint to CSV.
    ExportEmbeddings(ExportArgs),
    /// Sample tasks to JSON lines.
    GenTasks(GenArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub tasks_per_mode: usize,
    #[arg(long, conflicts_with = "csv")]
    pub json: bool,
    #[arg(long)]
    pub csv: bool,
    #[arg(long, default_value_t = DEFAULT_EVAL_SEED)]
    pub seed: u64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub tasks: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EVAL_SEED)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["2", "3", "5"]))]
    pub modes: String,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ExportEmbeddings(a) => export(a),
        Command::GenTasks(a) => gen_tasks(a),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(m) = a.model {
        cfg.model = m;
    }
    if let Some(s) = a.seed {
        cfg.training.seed = s;
    }
    if let Some(o) = a.out {
        cfg.output.dir = o;
    }
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir)?;
    checkpoint::write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;

    let mut model = Model::init(cfg.model, cfg.training.clone())?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let every = cfg.output.checkpoint_every;
    let ckpt = dir.join("checkpoint.bin");
    let log_every = (cfg.training.iterations / 20).max(1);
    eprintln!("training {} for {} iterations", cfg.model, cfg.training.iterations);
    model.train_with(|m, model| {
        serde_json::to_writer(&mut metrics, m)?;
        metrics.write_all(b"\n")?;
        if every > 0 && model.iteration % every == 0 {
            metrics.flush()?;
            checkpoint::save(model, &ckpt)?;
        }
        if model.iteration % log_every == 0 {
            eprintln!("iter {:>6}  query mse {:.4}  grad norm {:.3}", m.iteration, m.mean_query_loss, m.grad_norm);
        }
        Ok(())
    })?;
    metrics.flush()?;
    checkpoint::save(&model, &ckpt)?;
    eprintln!("wrote {}", ckpt.display());
    Ok(())
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => checkpoint::write_atomic(p, bytes),
        None => {
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.tasks_per_mode == 0 {
        return Err(Error::Config("--tasks-per-mode must be at least 1".into()));
    }
    let model = checkpoint::load(&a.checkpoint)?;
    let report = evaluate(&model, &model.config.modes, a.tasks_per_mode, a.seed)?;
    let mut buf = Vec::new();
    if a.csv {
        report.write_csv(&mut buf)?;
    } else {
        serde_json::to_writer_pretty(&mut buf, &report)?;
        buf.push(b'\n');
    }
    write_output(a.out.as_deref(), &buf)
}

fn export(a: ExportArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let rows = export_embeddings(&model, &model.config.modes, a.tasks, a.seed, &a.out)?;
    eprintln!("wrote {} embeddings to {}", rows.len(), a.out.display());
    Ok(())
}

fn gen_tasks(a: GenArgs) -> Result<()> {
    let n: usize = a.modes.parse().expect("validated by clap");
    let dist = TaskDistribution::new(ModeSet::with_count(n)?, crate::tasks::DEFAULT_K, crate::tasks::DEFAULT_L, crate::tasks::DEFAULT_NOISE_SIGMA)?;
    let mut rng = RngStream::new(a.seed);
    let mut buf = Vec::new();
    for _ in 0..a.count {
        serde_json::to_writer(&mut buf, &dist.sample(&mut rng))?;
        buf.push(b'\n');
    }
    checkpoint::write_atomic(&a.out, &buf)
}
