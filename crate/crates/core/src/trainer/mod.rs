//! Joint training of the noise predictor and the gating network, plus the
//! baseline methods that share the same loop.

pub mod behavior;
pub mod buffer;
pub mod config;
pub mod log;
pub mod loss;

pub use behavior::BehaviorModel;
pub use buffer::ExpertBuffer;
pub use config::{Method, TrainConfig};
pub use log::LossLog;
pub use loss::{gating_objective, kl_diagnostic, GatingTerms, LossBreakdown};

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::baselines::load_balancing_term;
use crate::envs::Dataset;
use crate::error::{Error, Result};
use crate::gating::{batch_conditional, gating_energies, sample_assignments, GatingNetwork};
use crate::model::{diffusion_loss, noise_batch, per_sample_mse, NoisePredictor, NoisedBatch, Route};
use crate::numeric::{AdamW, ParamStore, Tape, Tensor, Var};

/// Everything that evolves during a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub model: BehaviorModel,
    pub opt: AdamW,
    pub buffers: Vec<ExpertBuffer>,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
}

/// Result of one iteration: the loss terms, the expert batches that
/// received gradient, and buffer fill levels after the update.
#[derive(Clone, Debug)]
pub struct IterationOutput {
    pub loss: LossBreakdown,
    pub expert_batches: Vec<(Vec<usize>, NoisedBatch)>,
    pub buffer_fill: Vec<usize>,
}

impl TrainState {
    pub fn new(cfg: TrainConfig, dataset: &Dataset) -> Result<Self> {
        let model = BehaviorModel::new(&cfg, dataset)?;
        Self::from_model(cfg, model, dataset)
    }

    /// Continues from existing parameters with a fresh optimizer and
    /// buffers bound to `dataset`.
    pub fn from_model(cfg: TrainConfig, model: BehaviorModel, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(Error::contract("training on an empty dataset"));
        }
        let expected = cfg.model_config(dataset.obs_dim, dataset.horizon, dataset.action_dim);
        if &expected != model.model_config() || model.method != cfg.method || model.gate.experts() != cfg.experts {
            return Err(Error::contract(format!(
                "model architecture {:?}/{} does not match config {:?}/{}",
                model.model_config(),
                model.method,
                expected,
                cfg.method
            )));
        }
        let opt = AdamW::new(&model.store, cfg.optimizer());
        let buffers = (0..cfg.experts)
            .map(|_| ExpertBuffer::new(cfg.buffer_capacity, dataset.len()))
            .collect();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            model,
            opt,
            buffers,
            iteration: 0,
        })
    }
}

fn normal_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Tensor> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
}

fn sum_vars(tape: &mut Tape<'_>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// One full iteration of the configured method, ending in a single joint
/// optimizer step.
pub fn train_iteration(state: &mut TrainState, dataset: &Dataset) -> Result<IterationOutput> {
    if dataset.is_empty() {
        return Err(Error::contract("training on an empty dataset"));
    }
    if state.buffers.iter().any(|b| b.capacity() != state.cfg.buffer_capacity) {
        return Err(Error::contract("buffers are not bound to this run"));
    }
    let warm = state.cfg.warmup_iterations;
    state.opt.config.lr = if warm > 0 {
        state.cfg.lr * ((state.iteration + 1) as f32 / warm as f32).min(1.0)
    } else {
        state.cfg.lr
    };
    let out = match state.cfg.method {
        Method::Dp | Method::Dibm => dibm_iteration(state, dataset)?,
        Method::VanillaMoe | Method::TaskwiseMoe => routed_iteration(state, dataset)?,
    };
    state.iteration += 1;
    Ok(out)
}

/// Random draws that fix the loss of one Di-BM iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct JointInputs {
    /// `[B, D]` gating-batch observations.
    pub gating_obs: Tensor,
    /// `[B, H*A]` noise targets of the detached full-batch forward.
    pub gating_eps: Tensor,
    /// Per expert: noised gating-batch chunks and their diffusion steps.
    pub gating_noisy: Vec<(Tensor, Vec<usize>)>,
    /// Per expert: the batch drawn from its buffer.
    pub expert_batches: Vec<NoisedBatch>,
}

/// The joint loss recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    /// Sum over experts of the mean diffusion loss on their own batch.
    pub expert_term: Var,
    pub energies: Var,
    pub gating: GatingTerms,
}

/// `sum_e mse_e(own batch) + gating_objective(g, stopgrad(mse table))`.
pub fn joint_loss<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    policy: &NoisePredictor,
    gate: &GatingNetwork,
    inputs: &JointInputs,
    beta: f32,
    gamma: f32,
) -> Result<JointLoss> {
    let k = policy.experts();
    if inputs.gating_noisy.len() != k || inputs.expert_batches.len() != k || gate.experts() != k {
        return Err(Error::dim("joint_loss experts", k, inputs.expert_batches.len()));
    }
    let ob = tape.constant(inputs.gating_obs.clone());
    let energies = gate.forward(tape, store, ob)?;
    let mut expert_losses = Vec::with_capacity(k);
    let mut mse_cols = Vec::with_capacity(k);
    for (e, (batch, (noisy, ks))) in inputs.expert_batches.iter().zip(&inputs.gating_noisy).enumerate() {
        expert_losses.push(diffusion_loss(tape, store, policy, batch, e)?);
        let a = tape.constant(noisy.clone());
        let eps = tape.constant(inputs.gating_eps.clone());
        let pred = policy.forward(tape, store, a, ob, ks, e)?;
        let pred = tape.stop_gradient(pred);
        mse_cols.push(per_sample_mse(tape, pred, eps)?);
    }
    let expert_term = sum_vars(tape, &expert_losses)?;
    let mse_table = tape.concat_cols(&mse_cols)?;
    let gating = gating_objective(tape, energies, mse_table, beta, gamma)?;
    let total = tape.add(expert_term, gating.loss)?;
    Ok(JointLoss {
        total,
        expert_term,
        energies,
        gating,
    })
}

fn dibm_iteration(state: &mut TrainState, dataset: &Dataset) -> Result<IterationOutput> {
    let TrainState {
        cfg,
        model,
        opt,
        buffers,
        rng,
        ..
    } = state;
    let n = dataset.len();
    let b = cfg.gating_batch.min(n);
    let s = cfg.samples_per_expert.min(b);
    let idx_b = sample(rng, n, b).into_vec();
    let obs_b = Tensor::from_rows(&idx_b.iter().map(|&i| dataset.obs(i)).collect::<Vec<_>>())?;
    let clean_b = Tensor::from_rows(&idx_b.iter().map(|&i| dataset.chunk(i)).collect::<Vec<_>>())?;
    let eps_b = normal_tensor(b, clean_b.cols(), rng)?;
    let shared_ks: Option<Vec<usize>> = cfg
        .per_sample_k
        .then(|| (0..b).map(|_| rng.random_range(0..model.sched.len())).collect());

    let cond = batch_conditional(&gating_energies(&model.gate, &model.store, &obs_b)?);
    let mut draws = Vec::with_capacity(cfg.experts);
    let mut gating_noisy = Vec::with_capacity(cfg.experts);
    let mut batches = Vec::with_capacity(cfg.experts);
    let mut warmup = false;
    for (e, buffer) in buffers.iter_mut().enumerate() {
        let picks = sample_assignments(&cond.column(e), s, rng)?;
        buffer.push(&picks.iter().map(|&j| idx_b[j]).collect::<Vec<_>>())?;
        let (draw, w) = buffer.draw(cfg.expert_batch, rng)?;
        warmup |= w;
        let batch = noise_batch(dataset, &draw, &model.sched, cfg.per_sample_k, rng)?;
        let ks_b = shared_ks.clone().unwrap_or_else(|| vec![batch.ks[0]; b]);
        gating_noisy.push((model.sched.add_noise(&clean_b, &eps_b, &ks_b)?, ks_b));
        draws.push(draw);
        batches.push(batch);
    }
    let inputs = JointInputs {
        gating_obs: obs_b,
        gating_eps: eps_b,
        gating_noisy,
        expert_batches: batches,
    };

    let (loss, grads) = {
        let store = &model.store;
        let mut tape = Tape::new();
        let j = joint_loss(&mut tape, store, &model.policy, &model.gate, &inputs, cfg.beta, cfg.gamma)?;
        let mut grads = tape.backward(j.total)?;
        grads.fill_missing(store);
        let loss = LossBreakdown {
            expert_term: tape.value(j.expert_term).item() as f64,
            gating_mse: j.gating.mse,
            gating_repulsion: j.gating.repulsion,
            gating_entropy: j.gating.entropy,
            aux_term: 0.0,
            total: tape.value(j.total).item() as f64,
            gamma: cfg.gamma as f64,
            warmup,
        };
        (loss, grads)
    };
    opt.step(&mut model.store, &grads)?;
    Ok(IterationOutput {
        loss,
        expert_batches: draws.into_iter().zip(inputs.expert_batches).collect(),
        buffer_fill: buffers.iter().map(ExpertBuffer::len).collect(),
    })
}

/// Gated and task-wise baselines: one uniform batch of `K * B'` pairs per
/// iteration, routed inside the network.
fn routed_iteration(state: &mut TrainState, dataset: &Dataset) -> Result<IterationOutput> {
    let TrainState { cfg, model, opt, rng, .. } = state;
    let n = dataset.len();
    let rows = (cfg.expert_batch * cfg.experts).min(n);
    let idx = sample(rng, n, rows).into_vec();
    let batch = noise_batch(dataset, &idx, &model.sched, cfg.per_sample_k, rng)?;
    let per_row: Vec<usize> = match &model.assignment {
        Some(a) => idx
            .iter()
            .map(|&i| a.expert_for_task(dataset.pairs[i].task_id))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let (loss, grads) = {
        let store = &model.store;
        let mut tape = Tape::new();
        let a = tape.constant(batch.noisy.clone());
        let o = tape.constant(batch.obs.clone());
        let eps = tape.constant(batch.eps.clone());
        let route = match (&model.layer_gates, cfg.method) {
            (Some(g), Method::VanillaMoe) => Route::Gated(&g.gates),
            (None, Method::TaskwiseMoe) => Route::PerRow(&per_row),
            _ => return Err(Error::contract(format!("model is not set up for {}", cfg.method))),
        };
        let (pred, records) = model.policy.forward_routed(&mut tape, store, a, o, &batch.ks, route)?;
        let d = tape.sub(pred, eps)?;
        let sq = tape.square(d);
        let mse = tape.mean_all(sq);
        let mut total = mse;
        let mut aux = 0.0;
        if !records.is_empty() {
            let terms = records
                .iter()
                .map(|r| load_balancing_term(&mut tape, r))
                .collect::<Result<Vec<_>>>()?;
            let bal = sum_vars(&mut tape, &terms)?;
            let bal = tape.scale(bal, cfg.balance_weight);
            aux = tape.value(bal).item() as f64;
            total = tape.add(mse, bal)?;
        }
        let mut grads = tape.backward(total)?;
        grads.fill_missing(store);
        let loss = LossBreakdown {
            expert_term: tape.value(mse).item() as f64,
            aux_term: aux,
            total: tape.value(total).item() as f64,
            gamma: cfg.gamma as f64,
            ..LossBreakdown::default()
        };
        (loss, grads)
    };
    opt.step(&mut model.store, &grads)?;
    Ok(IterationOutput {
        loss,
        expert_batches: vec![(idx, batch)],
        buffer_fill: vec![0; cfg.experts],
    })
}

/// Aggregate outcome of [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub iterations: usize,
    /// Mean total loss over the last epoch.
    pub final_loss: f64,
    pub final_kl: f64,
}

/// KL diagnostic of the current gate on `dataset`, with a log-partition
/// estimated on the same data.
pub fn dataset_kl(model: &BehaviorModel, dataset: &Dataset) -> Result<f64> {
    let obs = BehaviorModel::dataset_obs(dataset, 0)?;
    let energies = gating_energies(&model.gate, &model.store, &obs)?;
    let z = crate::gating::LogPartition::from_energies(&energies)?;
    kl_diagnostic(&energies, &z)
}

/// Runs the configured number of iterations, logging every iteration, and
/// stores the log-partition estimate at the end.
pub fn train<W: Write>(state: &mut TrainState, dataset: &Dataset, mut log: Option<&mut LossLog<W>>) -> Result<TrainSummary> {
    let total = state.cfg.total_iterations(dataset.len());
    let per_epoch = dataset.len().div_ceil(state.cfg.gating_batch).max(1);
    let mut kl = dataset_kl(&state.model, dataset)?;
    let mut epoch_losses = Vec::with_capacity(per_epoch);
    let mut final_loss = f64::NAN;
    for it in 0..total {
        let out = train_iteration(state, dataset)?;
        epoch_losses.push(out.loss.total);
        let epoch_end = (it + 1) % per_epoch == 0 || it + 1 == total;
        if epoch_end {
            kl = dataset_kl(&state.model, dataset)?;
            final_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
            epoch_losses.clear();
        }
        if let Some(log) = log.as_deref_mut() {
            log.write(state.cfg.method, it as u64, (it / per_epoch) as u64, &out.loss, kl, &out.buffer_fill)?;
        }
    }
    if let Some(log) = log {
        log.flush()?;
    }
    let cfg = &state.cfg;
    state.model.refresh_log_partition(dataset, cfg.partition_samples, cfg.seed)?;
    Ok(TrainSummary {
        iterations: total,
        final_loss,
        final_kl: kl,
    })
}

/// Continues training `pretrained` on a `ratio` subsample of `dataset`.
/// The pretrained normalization is kept; the log-partition is re-estimated
/// on the subsample.
pub fn finetune<W: Write>(
    pretrained: BehaviorModel,
    dataset: &Dataset,
    ratio: f64,
    cfg: &TrainConfig,
    log: Option<&mut LossLog<W>>,
) -> Result<(TrainState, TrainSummary)> {
    let sub = dataset.subsample(ratio, cfg.seed)?;
    let sub = Dataset::with_stats(sub.task_count, sub.pairs, pretrained.stats.clone());
    let mut state = TrainState::from_model(cfg.clone(), pretrained, &sub)?;
    let summary = train(&mut state, &sub, log)?;
    Ok((state, summary))
}
