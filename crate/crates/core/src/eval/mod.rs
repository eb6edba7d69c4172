//! Inference, closed-loop rollouts, evaluation reports, checkpoints and
//! CSV exports.

pub mod checkpoint;
pub mod export;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use export::{
    export_traces, trace_header, write_beta_sweep, write_data_ratio, write_embeddings, write_report, BetaSweepRow,
    DataRatioRow,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::{scripted_demo, step_env, Demonstrator, EnvState, TaskSpec, CHUNK_HORIZON, EXEC_HORIZON};
use crate::envs::demo::DEMO_STEP_CAP;
use crate::error::{Error, Result};
use crate::gating::{gating_energies, posterior};
use crate::model::{argmax, denoise_step, Route};
use crate::numeric::{Tape, Tensor};
use crate::par;
use crate::trainer::{BehaviorModel, Method};

/// Evaluation episodes start here so they never share layouts with
/// generated training data of small seeds.
pub const EVAL_EPISODE_BASE: u64 = 500_000;

/// Episode cap as a multiple of the scripted demo length on the same layout.
pub const EPISODE_CAP_FACTOR: usize = 4;

/// How the expert is picked from the posterior.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    #[default]
    Argmax,
    Sample,
}

impl fmt::Display for SelectMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectMode::Argmax => "argmax",
            SelectMode::Sample => "sample",
        })
    }
}

impl FromStr for SelectMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(SelectMode::Argmax),
            "sample" => Ok(SelectMode::Sample),
            other => Err(Error::config("mode", format!("unknown mode `{other}` (argmax | sample)"))),
        }
    }
}

/// One inference: an action chunk in environment units, the posterior the
/// expert was picked from, and the picked expert.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    /// Row-major `[CHUNK_HORIZON, ACTION_DIM]`.
    pub chunk: Vec<f32>,
    pub posterior: Vec<f32>,
    pub expert: usize,
}

fn one_hot(k: usize, e: usize) -> Vec<f32> {
    let mut v = vec![0.0; k];
    v[e] = 1.0;
    v
}

fn sample_index(probs: &[f32], rng: &mut impl Rng) -> usize {
    let u: f32 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Expert posterior for one normalized observation row under the stored
/// log-partition.
pub fn observation_posterior(model: &BehaviorModel, obs_norm: &Tensor) -> Result<Vec<f32>> {
    let energies = gating_energies(&model.gate, &model.store, obs_norm)?;
    Ok(posterior(&energies, model.log_z.as_ref())?.row(0).to_vec())
}

/// Picks an expert for `obs` (raw environment units) and denoises an action
/// chunk with it. `force_expert` bypasses the posterior.
pub fn infer_action(
    model: &BehaviorModel,
    obs: &[f32],
    mode: SelectMode,
    force_expert: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Decision> {
    let cfg = model.model_config();
    if obs.len() != cfg.obs_dim {
        return Err(Error::dim("infer_action observation", cfg.obs_dim, obs.len()));
    }
    let k = cfg.experts;
    if let Some(e) = force_expert {
        if e >= k {
            return Err(Error::contract(format!("forced expert {e} out of range [0, {k})")));
        }
    }
    let obs_norm = Tensor::matrix(1, obs.len(), model.stats.normalize_obs(obs))?;
    let task_expert;
    let (posterior, route) = match (force_expert, model.method) {
        (Some(e), _) => (one_hot(k, e), Route::Expert(e)),
        (None, Method::Dibm | Method::Dp) => {
            let post = observation_posterior(model, &obs_norm)?;
            let e = match mode {
                SelectMode::Argmax => argmax(&post),
                SelectMode::Sample => sample_index(&post, rng),
            };
            (post, Route::Expert(e))
        }
        (None, Method::TaskwiseMoe) => {
            let assignment = model
                .assignment
                .as_ref()
                .ok_or_else(|| Error::contract("task-wise model without an assignment"))?;
            task_expert = [crate::baselines::taskwise_route(assignment, obs)?];
            (one_hot(k, task_expert[0]), Route::PerRow(&task_expert))
        }
        (None, Method::VanillaMoe) => {
            let gates = model
                .layer_gates
                .as_ref()
                .ok_or_else(|| Error::contract("gated model without layer gates"))?;
            (Vec::new(), Route::Gated(&gates.gates))
        }
    };
    let n = cfg.chunk_len();
    let mut a: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let mut posterior = posterior;
    if posterior.is_empty() {
        // The first mixture layer's gate at the first reverse step stands in
        // for the posterior of the gated baseline.
        let mut tape = Tape::new();
        let av = tape.constant(Tensor::matrix(1, n, a.clone())?);
        let ov = tape.constant(obs_norm.clone());
        let (_, records) = model
            .policy
            .forward_routed(&mut tape, &model.store, av, ov, &[model.infer.steps[0]], route)?;
        posterior = tape.value(records[0].probs).row(0).to_vec();
    }
    let expert = match route {
        Route::Expert(e) => e,
        _ => argmax(&posterior),
    };
    for &step in &model.infer.steps {
        a = denoise_step(&model.policy, &model.store, &model.sched, &model.infer, &a, &obs_norm, step, route)?;
    }
    Ok(Decision {
        chunk: model.stats.denormalize_actions(&a),
        posterior,
        expert,
    })
}

/// Anything that can choose action chunks in closed loop.
pub trait ChunkPolicy: Sync {
    fn experts(&self) -> usize;

    /// `layout` identifies the episode; `state` is the current simulator
    /// state.
    fn decide(&self, layout: u64, state: &EnvState, rng: &mut ChaCha8Rng) -> Result<Decision>;
}

/// A trained model used through [`infer_action`].
#[derive(Clone, Copy, Debug)]
pub struct ModelPolicy<'a> {
    pub model: &'a BehaviorModel,
    pub mode: SelectMode,
    pub force_expert: Option<usize>,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(model: &'a BehaviorModel, mode: SelectMode, force_expert: Option<usize>) -> Result<Self> {
        if let Some(e) = force_expert {
            if e >= model.experts() {
                return Err(Error::contract(format!("forced expert {e} out of range [0, {})", model.experts())));
            }
        }
        Ok(Self {
            model,
            mode,
            force_expert,
        })
    }
}

impl ChunkPolicy for ModelPolicy<'_> {
    fn experts(&self) -> usize {
        self.model.experts()
    }

    fn decide(&self, _layout: u64, state: &EnvState, rng: &mut ChaCha8Rng) -> Result<Decision> {
        infer_action(self.model, &state.observation(), self.mode, self.force_expert, rng)
    }
}

/// The scripted demonstrator, chunked by simulating it forward.
#[derive(Clone, Copy, Debug, Default)]
pub struct ScriptedPolicy;

impl ChunkPolicy for ScriptedPolicy {
    fn experts(&self) -> usize {
        1
    }

    fn decide(&self, layout: u64, state: &EnvState, _rng: &mut ChaCha8Rng) -> Result<Decision> {
        let demo = Demonstrator::new(layout);
        let mut s = state.clone();
        let mut chunk = Vec::new();
        for _ in 0..CHUNK_HORIZON {
            let a = demo.act(&s);
            chunk.extend_from_slice(&a);
            s = step_env(&s, &a);
        }
        Ok(Decision {
            chunk,
            posterior: vec![1.0],
            expert: 0,
        })
    }
}

/// One re-inference point of an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub timestep: u32,
    pub phase: u32,
    pub posterior: Vec<f32>,
    pub expert: usize,
    /// Raw observation the decision was made from.
    pub obs: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub task_id: u32,
    pub episode: u64,
    pub steps: Vec<TraceStep>,
    pub success: bool,
    pub length: u32,
}

/// Step cap for the episode on `layout_episode` of `task`.
pub fn episode_cap(task: &TaskSpec, episode: u64) -> usize {
    let demo_len = scripted_demo(task, episode).map_or(DEMO_STEP_CAP as usize, |d| d.len());
    EPISODE_CAP_FACTOR * demo_len
}

/// Runs one closed-loop episode, re-inferring every `EXEC_HORIZON` steps.
pub fn run_episode(policy: &dyn ChunkPolicy, task: &TaskSpec, episode: u64, rng_seed: u64) -> Result<EpisodeTrace> {
    let layout = task.layout_seed(episode);
    let cap = episode_cap(task, episode);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut s = EnvState::reset(task, layout);
    let mut steps = Vec::new();
    while !s.success && (s.t as usize) < cap {
        let obs = s.observation();
        let d = policy.decide(layout, &s, &mut rng)?;
        steps.push(TraceStep {
            timestep: s.t,
            phase: s.phase,
            posterior: d.posterior,
            expert: d.expert,
            obs,
        });
        for a in d.chunk.chunks(crate::envs::ACTION_DIM).take(EXEC_HORIZON) {
            s = step_env(&s, a);
            if s.success || s.t as usize >= cap {
                break;
            }
        }
    }
    Ok(EpisodeTrace {
        task_id: task.task_id,
        episode,
        steps,
        success: s.success,
        length: s.t,
    })
}

fn trial_episode(seed: u64, trial: usize) -> u64 {
    EVAL_EPISODE_BASE + seed * 10_000 + trial as u64
}

fn trial_seed(seed: u64, task_id: u32, trial: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ ((task_id as u64) << 32) ^ trial as u64
}

/// `n_trials` closed-loop episodes of `policy` on `task`. Trials run
/// concurrently and are returned in trial order.
pub fn rollout(policy: &dyn ChunkPolicy, task: &TaskSpec, n_trials: usize, seed: u64) -> Result<Vec<EpisodeTrace>> {
    if n_trials == 0 {
        return Err(Error::contract("rollout needs at least one trial"));
    }
    par::try_map_range(n_trials, |i| run_episode(policy, task, trial_episode(seed, i), trial_seed(seed, task.task_id, i)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: u32,
    pub task: String,
    pub successes: usize,
    pub trials: usize,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForcedResult {
    pub expert: usize,
    pub per_task: Vec<TaskResult>,
    pub total: f64,
}

/// Counts of selected experts at decision points of one task phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseUsage {
    pub task_id: u32,
    pub phase: u32,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub mode: SelectMode,
    pub seed: u64,
    pub trials: usize,
    pub per_task: Vec<TaskResult>,
    /// Arithmetic mean of the per-task rates.
    pub total: f64,
    pub forced: Vec<ForcedResult>,
    pub usage: Vec<PhaseUsage>,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub trials: usize,
    pub mode: SelectMode,
    pub seed: u64,
    /// Also run every expert alone.
    pub forced: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            trials: 10,
            mode: SelectMode::Argmax,
            seed: 0,
            forced: false,
        }
    }
}

fn summarize(tasks: &[TaskSpec], traces: &[Vec<EpisodeTrace>]) -> (Vec<TaskResult>, f64) {
    let per_task: Vec<TaskResult> = tasks
        .iter()
        .zip(traces)
        .map(|(t, tr)| {
            let successes = tr.iter().filter(|e| e.success).count();
            TaskResult {
                task_id: t.task_id,
                task: t.name.clone(),
                successes,
                trials: tr.len(),
                success_rate: successes as f64 / tr.len() as f64,
            }
        })
        .collect();
    let total = mean_rate(&per_task);
    (per_task, total)
}

pub fn mean_rate(per_task: &[TaskResult]) -> f64 {
    if per_task.is_empty() {
        return 0.0;
    }
    per_task.iter().map(|r| r.success_rate).sum::<f64>() / per_task.len() as f64
}

fn rollout_all(policy: &dyn ChunkPolicy, tasks: &[TaskSpec], opts: &EvalOptions) -> Result<Vec<Vec<EpisodeTrace>>> {
    if opts.trials == 0 {
        return Err(Error::contract("evaluation needs at least one trial"));
    }
    let n = opts.trials;
    let flat = par::try_map_range(tasks.len() * n, |j| {
        let (t, i) = (j / n, j % n);
        run_episode(policy, &tasks[t], trial_episode(opts.seed, i), trial_seed(opts.seed, tasks[t].task_id, i))
    })?;
    let mut it = flat.into_iter();
    Ok(tasks.iter().map(|_| it.by_ref().take(n).collect()).collect())
}

/// Success rates of `model` on `tasks`, plus the traces of the combined
/// (non-forced) run.
pub fn evaluate(model: &BehaviorModel, tasks: &[TaskSpec], opts: &EvalOptions) -> Result<(EvalReport, Vec<EpisodeTrace>)> {
    let policy = ModelPolicy::new(model, opts.mode, None)?;
    let traces = rollout_all(&policy, tasks, opts)?;
    let (per_task, total) = summarize(tasks, &traces);
    let mut forced = Vec::new();
    if opts.forced {
        for e in 0..model.experts() {
            let p = ModelPolicy::new(model, opts.mode, Some(e))?;
            let tr = rollout_all(&p, tasks, opts)?;
            let (per_task, total) = summarize(tasks, &tr);
            forced.push(ForcedResult {
                expert: e,
                per_task,
                total,
            });
        }
    }
    let traces: Vec<EpisodeTrace> = traces.into_iter().flatten().collect();
    let usage = phase_usage(&traces, model.experts());
    Ok((
        EvalReport {
            method: model.method.name().to_string(),
            mode: opts.mode,
            seed: opts.seed,
            trials: opts.trials,
            per_task,
            total,
            forced,
            usage,
        },
        traces,
    ))
}

/// Histogram of selected experts per `(task, phase)`.
pub fn phase_usage(traces: &[EpisodeTrace], experts: usize) -> Vec<PhaseUsage> {
    let mut m: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for t in traces {
        for s in &t.steps {
            let counts = m.entry((t.task_id, s.phase)).or_insert_with(|| vec![0; experts]);
            if s.expert < experts {
                counts[s.expert] += 1;
            }
        }
    }
    m.into_iter()
        .map(|((task_id, phase), counts)| PhaseUsage { task_id, phase, counts })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build_suite, held_out_task};

    #[test]
    fn scripted_policy_always_succeeds() {
        let mut tasks = build_suite(0);
        tasks.push(held_out_task(0));
        for task in &tasks {
            let traces = rollout(&ScriptedPolicy, task, 5, 1).unwrap();
            assert!(traces.iter().all(|t| t.success), "{}", task.name);
        }
    }

    #[test]
    fn sample_index_follows_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_index(&[0.0, 1.0, 0.0], &mut rng), 1);
        let hits = (0..10_000).filter(|_| sample_index(&[0.25, 0.75], &mut rng) == 1).count();
        assert!((hits as f64 / 10_000.0 - 0.75).abs() < 0.02);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [SelectMode::Argmax, SelectMode::Sample] {
            assert_eq!(m.to_string().parse::<SelectMode>().unwrap(), m);
        }
        assert!("greedy".parse::<SelectMode>().is_err());
    }
}
