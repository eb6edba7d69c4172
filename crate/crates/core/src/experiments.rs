//! Desk-scale comparative experiments shared by the CLI and the acceptance
//! suite: multi-task comparison, single-expert ablation, beta sweep and the
//! fine-tuning data-ratio curve.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::envs::{build_suite, generate_dataset, held_out_task, Dataset, TaskSpec};
use crate::error::Result;
use crate::eval::{evaluate, BetaSweepRow, DataRatioRow, EpisodeTrace, EvalOptions, EvalReport};
use crate::gating::{batch_conditional, column_entropy, gating_energies};
use crate::numeric::Tensor;
use crate::trainer::{finetune, train, BehaviorModel, LossLog, Method, TrainConfig, TrainState, TrainSummary};

/// Beta used for Di-BM in the comparative experiments.
pub const EXPERIMENT_BETA: f32 = 0.1;

/// Noise-predictor width used in the comparative experiments.
pub const EXPERIMENT_HIDDEN: usize = 64;

/// Data ratios of the fine-tuning curve.
pub const DATA_RATIOS: [f64; 4] = [0.1, 0.25, 0.5, 1.0];

/// Compute budget of the comparative experiments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Budget {
    pub demos_per_task: usize,
    pub suite_epochs: usize,
    /// Epochs of each beta-sweep run.
    pub sweep_epochs: usize,
    pub finetune_iterations: usize,
    pub trials: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            demos_per_task: 50,
            suite_epochs: 400,
            sweep_epochs: 200,
            finetune_iterations: 5000,
            trials: 50,
        }
    }
}

/// Training config of `method` in the comparative experiments. The plain
/// policy draws `K * B'` expert samples per iteration so every method sees
/// the same number of diffusion-loss samples.
pub fn experiment_config(method: Method, seed: u64, budget: &Budget) -> TrainConfig {
    let mut c = TrainConfig::for_method(method);
    let per_iteration = c.expert_batch * TrainConfig::default().experts;
    c.seed = seed;
    c.hidden = EXPERIMENT_HIDDEN;
    c.epochs = budget.suite_epochs;
    match method {
        Method::Dp => {
            c.expert_batch = per_iteration;
            c.samples_per_expert = c.gating_batch;
            c.buffer_capacity = 10 * per_iteration;
        }
        Method::Dibm => c.beta = EXPERIMENT_BETA,
        Method::VanillaMoe | Method::TaskwiseMoe => {}
    }
    c
}

/// Training data for the six-task suite.
pub fn suite_dataset(seed: u64, demos_per_task: usize) -> Result<Dataset> {
    Ok(generate_dataset(&build_suite(0), demos_per_task, seed)?.dataset)
}

/// Training data for the held-out task.
pub fn held_out_dataset(seed: u64, demos: usize) -> Result<Dataset> {
    Ok(generate_dataset(&[held_out_task(0)], demos, seed)?.dataset)
}

pub fn train_model(cfg: TrainConfig, dataset: &Dataset) -> Result<(BehaviorModel, TrainSummary)> {
    let mut state = TrainState::new(cfg, dataset)?;
    let summary = train::<std::io::Sink>(&mut state, dataset, None)?;
    Ok((state.model, summary))
}

/// Like [`train_model`], writing the loss log to `log`.
pub fn train_model_logged<W: std::io::Write>(
    cfg: TrainConfig,
    dataset: &Dataset,
    log: &mut LossLog<W>,
) -> Result<(TrainState, TrainSummary)> {
    let mut state = TrainState::new(cfg, dataset)?;
    let summary = train(&mut state, dataset, Some(log))?;
    Ok((state, summary))
}

/// One trained and evaluated method.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub method: Method,
    pub seed: u64,
    pub model: BehaviorModel,
    pub summary: TrainSummary,
    pub report: EvalReport,
    pub traces: Vec<EpisodeTrace>,
}

pub fn run_method(
    method: Method,
    seed: u64,
    dataset: &Dataset,
    tasks: &[TaskSpec],
    budget: &Budget,
    forced: bool,
) -> Result<MethodRun> {
    let (model, summary) = train_model(experiment_config(method, seed, budget), dataset)?;
    let opts = EvalOptions {
        trials: budget.trials,
        seed,
        forced,
        ..EvalOptions::default()
    };
    let (report, traces) = evaluate(&model, tasks, &opts)?;
    Ok(MethodRun {
        method,
        seed,
        model,
        summary,
        report,
        traces,
    })
}

/// `n` distinct dataset rows drawn with a fixed seed, in ascending order.
pub fn probe_indices(dataset: &Dataset, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9b0e);
    let mut idx = sample(&mut rng, dataset.len(), n.min(dataset.len())).into_vec();
    idx.sort_unstable();
    idx
}

/// Batch-conditional table of `model` over the probe rows.
pub fn probe_conditional(model: &BehaviorModel, dataset: &Dataset, probe: &[usize]) -> Result<Tensor> {
    let obs = Tensor::from_rows(&probe.iter().map(|&i| dataset.obs(i)).collect::<Vec<_>>())?;
    Ok(batch_conditional(&gating_energies(&model.gate, &model.store, &obs)?))
}

/// Mean batch-conditional column entropy over `batches` fixed random
/// batches of `batch` rows.
pub fn mean_conditional_entropy(model: &BehaviorModel, dataset: &Dataset, batch: usize, batches: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for b in 0..batches {
        let probe = probe_indices(dataset, batch, seed.wrapping_add(b as u64));
        total += column_entropy(&probe_conditional(model, dataset, &probe)?);
    }
    Ok(total / batches as f64)
}

/// Sweep rows for one trained model.
pub fn beta_sweep_rows(beta: f32, model: &BehaviorModel, dataset: &Dataset, probe: &[usize]) -> Result<Vec<BetaSweepRow>> {
    let cond = probe_conditional(model, dataset, probe)?;
    Ok(probe
        .iter()
        .enumerate()
        .map(|(r, &i)| BetaSweepRow {
            beta,
            obs_index: i,
            conditional: cond.row(r).to_vec(),
        })
        .collect())
}

/// Success on the held-out task after training on each ratio of
/// `held_out`, either from scratch or continuing from `pretrained`.
pub fn data_ratio_curve(
    method: Method,
    pretrained: Option<&BehaviorModel>,
    held_out: &Dataset,
    ratios: &[f64],
    seed: u64,
    budget: &Budget,
) -> Result<Vec<DataRatioRow>> {
    let task = held_out_task(0);
    let mut cfg = experiment_config(method, seed, budget);
    cfg.iterations = budget.finetune_iterations;
    let label = format!("{method}_{}", if pretrained.is_some() { "pretrain" } else { "scratch" });
    let opts = EvalOptions {
        trials: budget.trials,
        seed,
        ..EvalOptions::default()
    };
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let model = match pretrained {
            Some(p) => finetune::<std::io::Sink>(p.clone(), held_out, ratio, &cfg, None)?.0.model,
            None => train_model(cfg.clone(), &held_out.subsample(ratio, cfg.seed)?)?.0,
        };
        let (report, _) = evaluate(&model, std::slice::from_ref(&task), &opts)?;
        rows.push(DataRatioRow {
            method: label.clone(),
            ratio,
            seed,
            success: report.total,
        });
    }
    Ok(rows)
}
