use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dibm::envs::{build_suite, generate_dataset, held_out_task, load_dataset, save_dataset, Dataset};
use dibm::eval::{
    export_traces, load_checkpoint, save_checkpoint, write_beta_sweep, write_embeddings, write_report, Checkpoint, EvalOptions, SelectMode,
};
use dibm::experiments::{beta_sweep_rows, probe_indices};
use dibm::trainer::{finetune, train, LossLog, Method, TrainConfig, TrainState};

#[derive(Parser)]
#[command(name = "dibm", version, about = "Mixture-of-experts diffusion behavior models with energy-based gating")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted demonstrations for the task suite.
    GenData(GenData),
    /// Train a model from scratch.
    Train(Train),
    /// Continue training a checkpoint on a fraction of a new dataset.
    Finetune(Finetune),
    /// Roll out a checkpoint and report success rates.
    Eval(Eval),
    /// Train once per beta and export batch-conditional columns.
    SweepBeta(SweepBeta),
    /// Dump per-observation conditioning features and selected experts.
    ExportEmbeddings(ExportEmbeddings),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    /// Successful demonstrations per task.
    #[arg(long, default_value_t = 50)]
    demos: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generate the held-out task instead of the training suite.
    #[arg(long)]
    held_out: bool,
}

#[derive(Args)]
struct RunArgs {
    /// TOML training config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config iteration count.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Overrides the config method.
    #[arg(long)]
    method: Option<Method>,
    /// Output directory for the checkpoint, loss log and resolved config.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Finetune {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Fraction of the dataset to train on, in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    ratio: f64,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Trials per task.
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = SelectMode::Argmax)]
    mode: SelectMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also evaluate every expert alone.
    #[arg(long)]
    forced: bool,
    /// Evaluate on the held-out task instead of the suite.
    #[arg(long)]
    held_out: bool,
    /// Output directory for the report and traces.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepBeta {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1e-3,3e-3,1e-2")]
    betas: Vec<f32>,
    #[command(flatten)]
    run: RunArgs,
    /// Observations in the exported probe set.
    #[arg(long, default_value_t = 128)]
    probe: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportEmbeddings {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn resolve_config(run: &RunArgs, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = match &run.config {
        Some(path) => TrainConfig::load(path)?,
        None => base,
    };
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(iterations) = run.iterations {
        cfg.iterations = iterations;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_run(dir: &Path, state: &TrainState) -> Result<()> {
    fs::write(dir.join("config.toml"), state.cfg.to_toml()).with_context(|| format!("writing config in {}", dir.display()))?;
    save_checkpoint(&Checkpoint::from_state(state), &dir.join("model.ckpt"))?;
    Ok(())
}

fn gen_data(a: GenData) -> Result<()> {
    let tasks = if a.held_out { vec![held_out_task(0)] } else { build_suite(0) };
    let g = generate_dataset(&tasks, a.demos, a.seed)?;
    save_dataset(&g.dataset, &a.out)?;
    println!("{} pairs from {} tasks written to {}", g.dataset.len(), tasks.len(), a.out.display());
    Ok(())
}

fn run_train(a: Train) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let mut cfg = resolve_config(&a.run, TrainConfig::default())?;
    if let Some(method) = a.method {
        let reset = TrainConfig::for_method(method);
        cfg.method = method;
        if method == Method::Dp {
            (cfg.experts, cfg.gamma) = (reset.experts, reset.gamma);
        }
        cfg.validate()?;
    }
    create_dir(&a.out)?;
    let mut log = LossLog::create(&a.out.join("loss.csv"), cfg.experts)?;
    let mut state = TrainState::new(cfg, &data)?;
    let summary = train(&mut state, &data, Some(&mut log))?;
    write_run(&a.out, &state)?;
    println!(
        "{} iterations, final loss {:.5}, KL {:.4}",
        summary.iterations, summary.final_loss, summary.final_kl
    );
    Ok(())
}

fn run_finetune(a: Finetune) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let cfg = resolve_config(&a.run, ckpt.config.clone())?;
    create_dir(&a.out)?;
    let mut log = LossLog::create(&a.out.join("loss.csv"), cfg.experts)?;
    let (state, summary) = finetune(ckpt.model, &data, a.ratio, &cfg, Some(&mut log))?;
    write_run(&a.out, &state)?;
    println!(
        "ratio {}: {} iterations, final loss {:.5}",
        a.ratio, summary.iterations, summary.final_loss
    );
    Ok(())
}

fn run_eval(a: Eval) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let tasks = if a.held_out { vec![held_out_task(0)] } else { build_suite(0) };
    let opts = EvalOptions {
        trials: a.trials,
        mode: a.mode,
        seed: a.seed,
        forced: a.forced,
    };
    let (report, traces) = dibm::eval::evaluate(&ckpt.model, &tasks, &opts)?;
    create_dir(&a.out)?;
    write_report(&report, &a.out.join("report.json"))?;
    export_traces(&traces, ckpt.model.experts(), &a.out.join("traces.csv"))?;
    for t in &report.per_task {
        println!("{:<16} {:.3}", t.task, t.success_rate);
    }
    println!("{:<16} {:.3}", "total", report.total);
    Ok(())
}

fn run_sweep(a: SweepBeta) -> Result<()> {
    if a.betas.is_empty() {
        bail!("--betas needs at least one value");
    }
    let data = load_dataset(&a.data)?;
    let base = resolve_config(&a.run, TrainConfig::default())?;
    let probe = probe_indices(&data, a.probe, base.seed);
    create_dir(&a.out)?;
    let mut rows = Vec::new();
    for &beta in &a.betas {
        let cfg = TrainConfig { beta, ..base.clone() };
        cfg.validate()?;
        let dir = a.out.join(format!("beta_{beta:e}"));
        create_dir(&dir)?;
        let mut log = LossLog::create(&dir.join("loss.csv"), cfg.experts)?;
        let mut state = TrainState::new(cfg, &data)?;
        let summary = train(&mut state, &data, Some(&mut log))?;
        write_run(&dir, &state)?;
        rows.extend(beta_sweep_rows(beta, &state.model, &data, &probe)?);
        println!("beta {beta:e}: final loss {:.5}, KL {:.4}", summary.final_loss, summary.final_kl);
    }
    write_beta_sweep(&rows, &a.out.join("sweep.csv"))?;
    Ok(())
}

fn run_export(a: ExportEmbeddings) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let raw = load_dataset(&a.data)?;
    // Features are computed under the checkpoint's normalization.
    let data = Dataset::with_stats(raw.task_count, raw.pairs, ckpt.model.stats.clone());
    write_embeddings(&ckpt.model, &data, &a.out)?;
    println!("{} embeddings written to {}", data.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Finetune(a) => run_finetune(a),
        Command::Eval(a) => run_eval(a),
        Command::SweepBeta(a) => run_sweep(a),
        Command::ExportEmbeddings(a) => run_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
