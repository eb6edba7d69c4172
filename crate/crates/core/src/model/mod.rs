//! The diffusion action model: noise schedule, expert-indexed noise
//! predictor and the strided deterministic sampler.

pub mod network;
pub mod schedule;

pub use network::{
    argmax, diffusion_loss, per_sample_mse, Block, GateRecord, MoELayer, ModelConfig, NoisePredictor, NoisedBatch, ResBlock,
    Route,
};
pub use schedule::{add_noise_row, ddim_update, make_schedule, InferenceSchedule, NoiseSchedule};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::envs::Dataset;
use crate::error::Result;
use crate::numeric::{ParamStore, Tensor};

/// Draws noise and diffusion steps for dataset rows `idx` and forms the
/// noised chunks. With `per_sample_k` false, one step is shared by the
/// whole batch.
pub fn noise_batch(
    dataset: &Dataset,
    idx: &[usize],
    sched: &NoiseSchedule,
    per_sample_k: bool,
    rng: &mut impl Rng,
) -> Result<NoisedBatch> {
    let obs: Vec<Vec<f32>> = idx.iter().map(|&i| dataset.obs(i)).collect();
    let chunks: Vec<Vec<f32>> = idx.iter().map(|&i| dataset.chunk(i)).collect();
    noise_rows(obs, chunks, sched, per_sample_k, rng)
}

/// [`noise_batch`] over explicit normalized rows.
pub fn noise_rows(
    obs: Vec<Vec<f32>>,
    chunks: Vec<Vec<f32>>,
    sched: &NoiseSchedule,
    per_sample_k: bool,
    rng: &mut impl Rng,
) -> Result<NoisedBatch> {
    let n = obs.len();
    let ks: Vec<usize> = if per_sample_k {
        (0..n).map(|_| rng.random_range(0..sched.len())).collect()
    } else {
        vec![rng.random_range(0..sched.len()); n]
    };
    let cols = chunks.first().map_or(0, Vec::len);
    let eps: Vec<f32> = (0..n * cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let clean = Tensor::from_rows(&chunks)?;
    let eps = Tensor::new(clean.shape().to_vec(), eps)?;
    let noisy = sched.add_noise(&clean, &eps, &ks)?;
    Ok(NoisedBatch {
        obs: Tensor::from_rows(&obs)?,
        noisy,
        eps,
        ks,
    })
}

/// Runs the reverse process for one observation row under `route`,
/// starting from unit-normal noise. Returns a normalized chunk in
/// `[-1, 1]`.
pub fn sample_chunk(
    model: &NoisePredictor,
    store: &ParamStore,
    sched: &NoiseSchedule,
    infer: &InferenceSchedule,
    obs: &[f32],
    route: Route<'_>,
    rng: &mut impl Rng,
) -> Result<Vec<f32>> {
    let n = model.config.chunk_len();
    let mut a: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let obs = Tensor::matrix(1, obs.len(), obs.to_vec())?;
    for &k in &infer.steps {
        a = denoise_step(model, store, sched, infer, &a, &obs, k, route)?;
    }
    Ok(a)
}

/// One reverse update from step `k` to the next step of `infer`. The final
/// step's output is clamped to `[-1, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step(
    model: &NoisePredictor,
    store: &ParamStore,
    sched: &NoiseSchedule,
    infer: &InferenceSchedule,
    a_k: &[f32],
    obs: &Tensor,
    k: usize,
    route: Route<'_>,
) -> Result<Vec<f32>> {
    let next = infer.next(k)?;
    let a = Tensor::matrix(1, a_k.len(), a_k.to_vec())?;
    let eps = model.predict_noise_routed(store, &a, obs, &[k], route)?;
    Ok(ddim_update(a_k, eps.data(), sched.alpha_bars[k], next.map(|j| sched.alpha_bars[j])))
}
