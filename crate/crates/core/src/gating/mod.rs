//! The gating energy network and the distributions derived from it.
//!
//! Energies `g(o, e)` define per-expert unnormalized observation densities.
//! Over a batch they give the batch-conditional `pi(o|e)` (a softmax down
//! each expert's column); with per-expert log-partitions they give the
//! posterior `pi(e|o)` under a uniform expert prior.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{logsumexp, softmax, Activation, Axis, Mlp, ParamId, ParamStore, Tape, Tensor, Var};

/// MLP from an observation to `K` energies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingNetwork {
    pub mlp: Mlp,
}

impl GatingNetwork {
    /// `hidden` lists the hidden widths. With `zero_output`, the final
    /// layer starts at zero so every expert begins with equal energy.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        obs_dim: usize,
        hidden: &[usize],
        experts: usize,
        activation: Activation,
        zero_output: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if experts == 0 {
            return Err(Error::contract("gating network needs at least one expert"));
        }
        let mut dims = vec![obs_dim];
        dims.extend_from_slice(hidden);
        dims.push(experts);
        let mlp = Mlp::new(store, name, &dims, activation, rng)?;
        if zero_output {
            let last = mlp.layers.last().expect("at least one layer");
            store.get_mut(last.weight).data_mut().fill(0.0);
            store.get_mut(last.bias).data_mut().fill(0.0);
        }
        Ok(Self { mlp })
    }

    pub fn experts(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, obs: Var) -> Result<Var> {
        let cols = tape.value(obs).cols();
        if cols != self.obs_dim() {
            return Err(Error::contract(format!(
                "gating input has {cols} features, network expects {}",
                self.obs_dim()
            )));
        }
        self.mlp.forward(tape, store, obs)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}

/// `[B, K]` energies for a batch of observations.
pub fn gating_energies(net: &GatingNetwork, store: &ParamStore, obs: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let o = tape.constant(obs.clone());
    let g = net.forward(&mut tape, store, o)?;
    let out = tape.value(g).clone();
    if !out.is_finite() {
        return Err(Error::NonFinite("gating energies"));
    }
    Ok(out)
}

/// Column `e` is the softmax of expert `e`'s energies over the batch.
pub fn batch_conditional(energies: &Tensor) -> Tensor {
    softmax(energies, Axis::Cols)
}

/// Row `i` is the softmax over experts of `energies[i, e] - log_z[e]`, or
/// of the raw energies when no partition is given.
pub fn posterior(energies: &Tensor, log_z: Option<&LogPartition>) -> Result<Tensor> {
    match log_z {
        None => Ok(softmax(energies, Axis::Rows)),
        Some(z) => {
            if z.log_z.len() != energies.cols() {
                return Err(Error::dim("posterior log-partition", energies.cols(), z.log_z.len()));
            }
            let mut logits = energies.clone();
            for r in 0..logits.rows() {
                logits.row_mut(r).iter_mut().zip(&z.log_z).for_each(|(v, z)| *v -= z);
            }
            Ok(softmax(&logits, Axis::Rows))
        }
    }
}

/// Per-expert Monte Carlo log-partition `log Z_e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogPartition {
    pub log_z: Vec<f32>,
    pub samples: usize,
}

impl LogPartition {
    pub fn from_energies(energies: &Tensor) -> Result<Self> {
        if energies.rows() == 0 {
            return Err(Error::contract("log-partition over an empty sample"));
        }
        let log_z: Vec<f32> = (0..energies.cols()).map(|e| logsumexp(&energies.column(e))).collect();
        if log_z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log-partition"));
        }
        Ok(Self {
            log_z,
            samples: energies.rows(),
        })
    }
}

/// `log Z_e = logsumexp_i g(o_i, e)` over the given observations.
pub fn estimate_log_partition(net: &GatingNetwork, store: &ParamStore, obs: &Tensor) -> Result<LogPartition> {
    LogPartition::from_energies(&gating_energies(net, store, obs)?)
}

/// Energies, batch-conditional and posterior for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingTable {
    pub energies: Tensor,
    pub batch_conditional: Tensor,
    pub posterior: Tensor,
}

impl GatingTable {
    pub fn new(energies: Tensor, log_z: Option<&LogPartition>) -> Result<Self> {
        if energies.rows() == 0 {
            return Err(Error::contract("gating table over an empty batch"));
        }
        Ok(Self {
            batch_conditional: batch_conditional(&energies),
            posterior: posterior(&energies, log_z)?,
            energies,
        })
    }

    /// Mean Shannon entropy (nats) of the batch-conditional columns.
    pub fn mean_column_entropy(&self) -> f64 {
        column_entropy(&self.batch_conditional)
    }
}

/// Mean entropy (nats) of the columns of a column-stochastic matrix.
pub fn column_entropy(p: &Tensor) -> f64 {
    let k = p.cols();
    let total: f64 = (0..k)
        .map(|e| {
            p.column(e)
                .iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| -(v as f64) * (v as f64).ln())
                .sum::<f64>()
        })
        .sum();
    total / k as f64
}

/// Draws `s` distinct indices with probability proportional to `probs`,
/// without replacement, by taking the top `s` Gumbel-perturbed log-weights.
/// Zero-probability entries come last, so `s = len` always returns every
/// index.
pub fn sample_assignments(probs: &[f32], s: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if s > probs.len() {
        return Err(Error::contract(format!("cannot draw {s} distinct indices from {}", probs.len())));
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::contract("assignment probabilities must be finite and non-negative"));
    }
    let sum: f32 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-3 {
        return Err(Error::contract(format!("assignment probabilities sum to {sum}, not 1")));
    }
    let mut keys: Vec<(f64, usize)> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let gumbel = -(-u.ln()).ln();
            ((p as f64).ln() + gumbel, i)
        })
        .collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(keys.into_iter().take(s).map(|(_, i)| i).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_conditional_examples() {
        let p = batch_conditional(&Tensor::full(&[4, 3], 0.7));
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let p = batch_conditional(&Tensor::matrix(1, 3, vec![5.0, -2.0, 0.0]).unwrap());
        assert!(p.data().iter().all(|&v| v == 1.0));
        let p = batch_conditional(&Tensor::matrix(2, 1, vec![0.0, 3f32.ln()]).unwrap());
        assert!((p.data()[0] - 0.25).abs() < 1e-6 && (p.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn posterior_examples() {
        let one = posterior(&Tensor::matrix(3, 1, vec![1.0, -4.0, 9.0]).unwrap(), None).unwrap();
        assert!(one.data().iter().all(|&v| v == 1.0));
        let z = LogPartition {
            log_z: vec![0.3, 0.3],
            samples: 1,
        };
        let eq = posterior(&Tensor::full(&[2, 2], 1.5), Some(&z)).unwrap();
        assert!(eq.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        let z = LogPartition {
            log_z: vec![0.0, 1.0],
            samples: 1,
        };
        let p = posterior(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(), Some(&z)).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-7 && (p.data()[1] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn log_partition_examples() {
        let z = LogPartition::from_energies(&Tensor::matrix(1, 2, vec![0.25, -3.0]).unwrap()).unwrap();
        assert_eq!(z.log_z, vec![0.25, -3.0]);
        let z = LogPartition::from_energies(&Tensor::matrix(2, 1, vec![0.0, 3f32.ln()]).unwrap()).unwrap();
        assert!((z.log_z[0] - 4f32.ln()).abs() < 1e-6);
        assert!(LogPartition::from_energies(&Tensor::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn assignment_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut all = sample_assignments(&[0.5, 0.0, 0.5, 0.0], 4, &mut rng).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(sample_assignments(&[0.0, 1.0, 0.0], 1, &mut rng).unwrap(), vec![1]);
        assert!(sample_assignments(&[0.5, 0.5], 3, &mut rng).is_err());
    }

    #[test]
    fn single_draw_frequencies_match_probabilities() {
        let probs = [0.7, 0.2, 0.1];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_assignments(&probs, 1, &mut rng).unwrap()[0]] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            assert!((*c as f64 / n as f64 - p as f64).abs() < 0.01, "{counts:?}");
        }
    }
}
