use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numeric::{Activation, AdamWConfig};

/// Training method. All four share the trainer; they differ in routing and
/// in which loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain diffusion policy: one expert, no gating loss.
    Dp,
    Dibm,
    VanillaMoe,
    TaskwiseMoe,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dp, Method::Dibm, Method::VanillaMoe, Method::TaskwiseMoe];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dp => "dp",
            Method::Dibm => "dibm",
            Method::VanillaMoe => "vanilla_moe",
            Method::TaskwiseMoe => "taskwise_moe",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

/// Every knob of a training run. Defaults follow the reference
/// hyperparameter table where it gives one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// `K`.
    pub experts: usize,
    /// `S`: observations assigned to each expert per iteration.
    pub samples_per_expert: usize,
    /// `B`: gating batch size.
    pub gating_batch: usize,
    /// `B'`: expert batch size drawn from each buffer.
    pub expert_batch: usize,
    pub beta: f32,
    pub gamma: f32,
    pub t_train: usize,
    pub inference_steps: usize,
    pub lr: f32,
    pub weight_decay: f32,
    /// Linear learning-rate warm-up length in iterations.
    pub warmup_iterations: usize,
    pub epochs: usize,
    /// Overrides `epochs` when non-zero.
    pub iterations: usize,
    pub buffer_capacity: usize,
    pub seed: u64,
    /// One diffusion step per sample; otherwise one per expert batch.
    pub per_sample_k: bool,
    pub hidden: usize,
    pub obs_features: usize,
    pub blocks: usize,
    pub moe_every: usize,
    pub gate_hidden: Vec<usize>,
    pub activation: Activation,
    /// Observations used for the stored log-partition; 0 uses the whole
    /// training set.
    pub partition_samples: usize,
    /// Weight of the load-balancing penalty for the gated baseline.
    pub balance_weight: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Dibm,
            experts: 5,
            samples_per_expert: 32,
            gating_batch: 128,
            expert_batch: 32,
            beta: 3e-3,
            gamma: 100.0,
            t_train: 50,
            inference_steps: 16,
            lr: 1e-3,
            weight_decay: 1e-6,
            warmup_iterations: 0,
            epochs: 200,
            iterations: 0,
            buffer_capacity: 320,
            seed: 0,
            per_sample_k: true,
            hidden: 128,
            obs_features: 64,
            blocks: 4,
            moe_every: 4,
            gate_hidden: vec![64, 64],
            activation: Activation::Relu,
            partition_samples: 0,
            balance_weight: 0.01,
        }
    }
}

impl TrainConfig {
    /// Defaults adjusted for `method`: the plain policy has one expert and
    /// no gating loss.
    pub fn for_method(method: Method) -> Self {
        let mut c = Self {
            method,
            ..Self::default()
        };
        if method == Method::Dp {
            c.experts = 1;
            c.gamma = 0.0;
        }
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("unknown field"))
                .unwrap_or("<config>")
                .to_string();
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("experts", self.experts),
            ("samples_per_expert", self.samples_per_expert),
            ("gating_batch", self.gating_batch),
            ("expert_batch", self.expert_batch),
            ("inference_steps", self.inference_steps),
            ("buffer_capacity", self.buffer_capacity),
            ("hidden", self.hidden),
            ("obs_features", self.obs_features),
            ("blocks", self.blocks),
            ("moe_every", self.moe_every),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.epochs == 0 && self.iterations == 0 {
            return Err(Error::config("epochs", "epochs and iterations are both zero"));
        }
        if self.samples_per_expert > self.gating_batch {
            return Err(Error::config(
                "samples_per_expert",
                format!("S = {} exceeds gating batch B = {}", self.samples_per_expert, self.gating_batch),
            ));
        }
        if self.expert_batch > self.buffer_capacity {
            return Err(Error::config(
                "expert_batch",
                format!("B' = {} exceeds buffer capacity {}", self.expert_batch, self.buffer_capacity),
            ));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", format!("must be > 0, got {}", self.beta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", format!("must be >= 0, got {}", self.gamma)));
        }
        if self.t_train < 2 {
            return Err(Error::config("t_train", "must be >= 2"));
        }
        if self.inference_steps > self.t_train {
            return Err(Error::config("inference_steps", "must not exceed t_train"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be > 0"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if self.balance_weight.is_nan() || self.balance_weight < 0.0 {
            return Err(Error::config("balance_weight", "must be >= 0"));
        }
        if self.method == Method::Dp && self.experts != 1 {
            return Err(Error::config("experts", "the dp method uses exactly one expert"));
        }
        if self.method == Method::Dp && self.gamma != 0.0 {
            return Err(Error::config("gamma", "the dp method has no gating loss"));
        }
        Ok(())
    }

    pub fn model_config(&self, obs_dim: usize, horizon: usize, action_dim: usize) -> ModelConfig {
        ModelConfig {
            obs_dim,
            horizon,
            action_dim,
            hidden: self.hidden,
            obs_features: self.obs_features,
            blocks: self.blocks,
            moe_every: self.moe_every,
            experts: self.experts,
            t_train: self.t_train,
            activation: self.activation,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Iterations for a dataset of `n` pairs: `ceil(n / B)` per epoch.
    pub fn total_iterations(&self, n: usize) -> usize {
        if self.iterations > 0 {
            self.iterations
        } else {
            self.epochs * n.div_ceil(self.gating_batch).max(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_table() {
        let c = TrainConfig::default();
        assert_eq!((c.experts, c.samples_per_expert, c.gating_batch, c.expert_batch), (5, 32, 128, 32));
        assert_eq!((c.beta, c.gamma, c.t_train, c.inference_steps), (3e-3, 100.0, 50, 16));
        assert_eq!(c.buffer_capacity, 10 * c.samples_per_expert);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let p = TrainConfig::from_toml("beta = 0.01\nmethod = \"vanilla_moe\"").unwrap();
        assert_eq!(p.beta, 0.01);
        assert_eq!(p.method, Method::VanillaMoe);
    }

    #[test]
    fn validation_names_the_field() {
        let field = |text: &str| match TrainConfig::from_toml(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field("samples_per_expert = 200"), "samples_per_expert");
        assert_eq!(field("beta = 0.0"), "beta");
        assert_eq!(field("gamma = -1.0"), "gamma");
        assert_eq!(field("expert_batch = 400"), "expert_batch");
        assert_eq!(field("bogus = 1"), "bogus");
        assert_eq!(field("method = \"dp\""), "experts");
    }

    #[test]
    fn epoch_accounting() {
        let c = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        assert_eq!(c.total_iterations(129), 6);
        assert_eq!(c.total_iterations(128), 3);
    }
}
