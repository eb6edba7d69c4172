use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Method, TrainConfig};
use crate::baselines::{LayerGates, TaskAssignment};
use crate::envs::{build_suite, held_out_task, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::gating::{estimate_log_partition, GatingNetwork, LogPartition};
use crate::model::{make_schedule, InferenceSchedule, ModelConfig, NoisePredictor, NoiseSchedule};
use crate::numeric::{ParamStore, Tensor};

/// All learned state of a policy plus what inference needs alongside it.
#[derive(Clone, Debug)]
pub struct BehaviorModel {
    pub method: Method,
    pub store: ParamStore,
    pub policy: NoisePredictor,
    pub gate: GatingNetwork,
    pub layer_gates: Option<LayerGates>,
    pub assignment: Option<TaskAssignment>,
    pub log_z: Option<LogPartition>,
    pub stats: NormStats,
    pub sched: NoiseSchedule,
    pub infer: InferenceSchedule,
}

/// Seed for parameter initialization, kept apart from the training stream.
fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5eed)
}

impl BehaviorModel {
    pub fn new(cfg: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        let mc = cfg.model_config(dataset.obs_dim, dataset.horizon, dataset.action_dim);
        Self::with_model_config(cfg, mc, dataset.stats.clone())
    }

    pub fn with_model_config(cfg: &TrainConfig, mc: ModelConfig, stats: NormStats) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init_rng(cfg.seed);
        let mut store = ParamStore::new();
        let policy = NoisePredictor::new(&mut store, "policy", mc.clone(), &mut rng)?;
        let gate = GatingNetwork::new(
            &mut store,
            "gate",
            mc.obs_dim,
            &cfg.gate_hidden,
            cfg.experts,
            cfg.activation,
            cfg.experts == 1,
            &mut rng,
        )?;
        let layer_gates = (cfg.method == Method::VanillaMoe).then(|| LayerGates::new(&mut store, "layer_gate", &policy, &mut rng));
        let assignment = if cfg.method == Method::TaskwiseMoe {
            let mut tasks = build_suite(0);
            tasks.push(held_out_task(0));
            Some(TaskAssignment::default_for(&tasks, cfg.experts)?)
        } else {
            None
        };
        Ok(Self {
            method: cfg.method,
            store,
            policy,
            gate,
            layer_gates,
            assignment,
            log_z: None,
            stats,
            sched: make_schedule(mc.t_train)?,
            infer: InferenceSchedule::strided(mc.t_train, cfg.inference_steps)?,
        })
    }

    pub fn experts(&self) -> usize {
        self.policy.experts()
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.policy.config
    }

    /// Normalized observations of the whole dataset, or of its first
    /// `limit` rows when `limit` is non-zero.
    pub fn dataset_obs(dataset: &Dataset, limit: usize) -> Result<Tensor> {
        let n = if limit == 0 { dataset.len() } else { limit.min(dataset.len()) };
        if n == 0 {
            return Err(Error::contract("empty dataset"));
        }
        let rows: Vec<Vec<f32>> = (0..n).map(|i| dataset.obs(i)).collect();
        Tensor::from_rows(&rows)
    }

    /// Re-estimates and stores the log-partition on `dataset`. With
    /// `samples` non-zero, a seeded random subset of that size is used.
    pub fn refresh_log_partition(&mut self, dataset: &Dataset, samples: usize, seed: u64) -> Result<&LogPartition> {
        let obs = if samples == 0 || samples >= dataset.len() {
            Self::dataset_obs(dataset, 0)?
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10c2);
            let idx = rand::seq::index::sample(&mut rng, dataset.len(), samples).into_vec();
            Tensor::from_rows(&idx.iter().map(|&i| dataset.obs(i)).collect::<Vec<_>>())?
        };
        self.log_z = Some(estimate_log_partition(&self.gate, &self.store, &obs)?);
        Ok(self.log_z.as_ref().expect("just set"))
    }
}
