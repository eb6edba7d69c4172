use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::demo::{scripted_demo, Pair};
use super::task::TaskSpec;
use super::{ACTION_DIM, CHUNK_HORIZON, OBS_DIM};
use crate::error::{Error, Result};
use crate::par;

/// Per-dimension min/max for observations and actions. Maps raw values to
/// `[-1, 1]`; degenerate (constant) dimensions are only centered.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub obs_min: Vec<f32>,
    pub obs_max: Vec<f32>,
    pub act_min: Vec<f32>,
    pub act_max: Vec<f32>,
}

const MIN_RANGE: f32 = 1e-4;

fn norm(v: f32, lo: f32, hi: f32) -> f32 {
    let range = hi - lo;
    if range < MIN_RANGE {
        v - 0.5 * (lo + hi)
    } else {
        2.0 * (v - lo) / range - 1.0
    }
}

fn denorm(v: f32, lo: f32, hi: f32) -> f32 {
    let range = hi - lo;
    if range < MIN_RANGE {
        v + 0.5 * (lo + hi)
    } else {
        (v + 1.0) * 0.5 * range + lo
    }
}

impl NormStats {
    /// Identity-like stats for an empty dataset.
    pub fn unit() -> Self {
        Self {
            obs_min: vec![-1.0; OBS_DIM],
            obs_max: vec![1.0; OBS_DIM],
            act_min: vec![-1.0; ACTION_DIM],
            act_max: vec![1.0; ACTION_DIM],
        }
    }

    pub fn from_pairs(pairs: &[Pair]) -> Self {
        if pairs.is_empty() {
            return Self::unit();
        }
        let mut s = Self {
            obs_min: vec![f32::INFINITY; OBS_DIM],
            obs_max: vec![f32::NEG_INFINITY; OBS_DIM],
            act_min: vec![f32::INFINITY; ACTION_DIM],
            act_max: vec![f32::NEG_INFINITY; ACTION_DIM],
        };
        for p in pairs {
            for (j, &v) in p.obs.iter().enumerate() {
                s.obs_min[j] = s.obs_min[j].min(v);
                s.obs_max[j] = s.obs_max[j].max(v);
            }
            for (j, &v) in p.chunk.iter().enumerate() {
                let a = j % ACTION_DIM;
                s.act_min[a] = s.act_min[a].min(v);
                s.act_max[a] = s.act_max[a].max(v);
            }
        }
        s
    }

    pub fn normalize_obs(&self, obs: &[f32]) -> Vec<f32> {
        obs.iter()
            .enumerate()
            .map(|(j, &v)| norm(v, self.obs_min[j], self.obs_max[j]))
            .collect()
    }

    /// Normalizes a flat chunk (or single action) of interleaved actions.
    pub fn normalize_actions(&self, chunk: &[f32]) -> Vec<f32> {
        chunk
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let a = j % ACTION_DIM;
                norm(v, self.act_min[a], self.act_max[a])
            })
            .collect()
    }

    pub fn denormalize_actions(&self, chunk: &[f32]) -> Vec<f32> {
        chunk
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let a = j % ACTION_DIM;
                denorm(v, self.act_min[a], self.act_max[a])
            })
            .collect()
    }
}

/// Immutable set of `(observation, action chunk)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub obs_dim: usize,
    pub horizon: usize,
    pub action_dim: usize,
    /// Number of task slots the dataset was generated against.
    pub task_count: usize,
    pub stats: NormStats,
    pub pairs: Vec<Pair>,
}

impl Dataset {
    pub fn new(task_count: usize, pairs: Vec<Pair>) -> Self {
        let stats = NormStats::from_pairs(&pairs);
        Self::with_stats(task_count, pairs, stats)
    }

    pub fn with_stats(task_count: usize, pairs: Vec<Pair>, stats: NormStats) -> Self {
        Self {
            obs_dim: OBS_DIM,
            horizon: CHUNK_HORIZON,
            action_dim: ACTION_DIM,
            task_count,
            stats,
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn per_task_episodes(&self) -> BTreeMap<u32, usize> {
        let mut eps: BTreeMap<u32, std::collections::BTreeSet<u32>> = BTreeMap::new();
        for p in &self.pairs {
            eps.entry(p.task_id).or_default().insert(p.episode);
        }
        eps.into_iter().map(|(k, v)| (k, v.len())).collect()
    }

    pub fn per_task_pairs(&self) -> BTreeMap<u32, usize> {
        let mut m = BTreeMap::new();
        for p in &self.pairs {
            *m.entry(p.task_id).or_insert(0) += 1;
        }
        m
    }

    /// Normalized observation of pair `i`.
    pub fn obs(&self, i: usize) -> Vec<f32> {
        self.stats.normalize_obs(&self.pairs[i].obs)
    }

    /// Normalized action chunk of pair `i`.
    pub fn chunk(&self, i: usize) -> Vec<f32> {
        self.stats.normalize_actions(&self.pairs[i].chunk)
    }

    /// Deterministic subsample of `floor(ratio * len)` pairs (at least one).
    pub fn subsample(&self, ratio: f64, seed: u64) -> Result<Dataset> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::contract(format!("subsample ratio {ratio} not in (0, 1]")));
        }
        let n = ((ratio * self.len() as f64).floor() as usize).max(1).min(self.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        let pairs = idx.into_iter().map(|i| self.pairs[i].clone()).collect();
        Ok(Dataset::with_stats(self.task_count, pairs, self.stats.clone()))
    }
}

/// Result of dataset generation with rejection bookkeeping.
#[derive(Clone, Debug)]
pub struct Generated {
    pub dataset: Dataset,
    /// Rejected layouts per task id.
    pub rejected: BTreeMap<u32, usize>,
}

/// Largest tolerated demonstrator failure rate per task.
pub const MAX_REJECT_RATE: f64 = 0.10;

/// Generates `episodes_per_task` successful demos for every task.
///
/// Episode indices start at `seed * 100_000`, so distinct seeds draw
/// disjoint layouts. Failed layouts are skipped, counted and replaced by
/// the next index; a task whose failure rate exceeds [`MAX_REJECT_RATE`]
/// aborts generation.
pub fn generate_dataset(suite: &[TaskSpec], episodes_per_task: usize, seed: u64) -> Result<Generated> {
    if episodes_per_task == 0 {
        return Err(Error::contract("episodes_per_task must be >= 1"));
    }
    let base = seed * 100_000;
    let mut pairs = Vec::new();
    let mut rejected = BTreeMap::new();
    let task_count = suite.iter().map(|t| t.kind.slot() + 1).max().unwrap_or(0);
    for task in suite {
        let (mut accepted, mut failed, mut next) = (0usize, 0usize, 0u64);
        while accepted < episodes_per_task && failed <= episodes_per_task {
            let need = episodes_per_task - accepted;
            let batch = par::map_range(need, |i| scripted_demo(task, base + next + i as u64));
            next += need as u64;
            for attempt in batch {
                match attempt {
                    Ok(d) => {
                        pairs.extend(d.pairs);
                        accepted += 1;
                    }
                    Err(_) => failed += 1,
                }
            }
        }
        if failed as f64 > MAX_REJECT_RATE * (accepted + failed) as f64 {
            return Err(Error::Generation {
                task: task.name.clone(),
                reason: format!("{failed} demonstrator failures for {accepted} accepted episodes"),
            });
        }
        rejected.insert(task.task_id, failed);
    }
    Ok(Generated {
        dataset: Dataset::new(task_count, pairs),
        rejected,
    })
}
