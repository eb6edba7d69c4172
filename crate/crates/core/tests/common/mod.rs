#![allow(dead_code)]

use dibm::envs::NormStats;
use dibm::model::{ModelConfig, NoisedBatch};
use dibm::numeric::{Activation, Tensor};
use dibm::trainer::{BehaviorModel, JointInputs, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const TINY_OBS: usize = 3;
pub const TINY_CHUNK: usize = 2;

/// A smooth network small enough for finite differences.
pub fn tiny_model(experts: usize, seed: u64) -> BehaviorModel {
    let cfg = TrainConfig {
        experts,
        gate_hidden: vec![4],
        activation: Activation::Tanh,
        t_train: 4,
        inference_steps: 2,
        seed,
        ..TrainConfig::default()
    };
    let mc = ModelConfig {
        obs_dim: TINY_OBS,
        horizon: TINY_CHUNK,
        action_dim: 1,
        hidden: 4,
        obs_features: 2,
        blocks: 1,
        moe_every: 1,
        experts,
        t_train: 4,
        activation: Activation::Tanh,
    };
    let mut model = BehaviorModel::with_model_config(&cfg, mc, NormStats::unit()).unwrap();
    // Break the gate's symmetry for K = 1 as well.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xab);
    for id in model.gate.params() {
        for v in model.store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    model
}

pub fn normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap()
}

fn steps(n: usize, t: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..t)).collect()
}

/// Random joint-loss inputs with `b` gating rows and `b_prime` rows per
/// expert batch.
pub fn random_inputs(model: &BehaviorModel, b: usize, b_prime: usize, rng: &mut impl Rng) -> JointInputs {
    let t = model.sched.len();
    let k = model.experts();
    JointInputs {
        gating_obs: normal(b, TINY_OBS, rng),
        gating_eps: normal(b, TINY_CHUNK, rng),
        gating_noisy: (0..k).map(|_| (normal(b, TINY_CHUNK, rng), steps(b, t, rng))).collect(),
        expert_batches: (0..k)
            .map(|_| NoisedBatch {
                obs: normal(b_prime, TINY_OBS, rng),
                noisy: normal(b_prime, TINY_CHUNK, rng),
                eps: normal(b_prime, TINY_CHUNK, rng),
                ks: steps(b_prime, t, rng),
            })
            .collect(),
    }
}
