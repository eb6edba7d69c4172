use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Activation, Axis, Linear, ParamId, ParamStore, Tape, Tensor, Var};

/// Shape of the noise-prediction network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub horizon: usize,
    pub action_dim: usize,
    pub hidden: usize,
    pub obs_features: usize,
    /// Residual blocks in the body.
    pub blocks: usize,
    /// Every `moe_every`-th block (1-based) is a mixture-of-experts layer.
    pub moe_every: usize,
    pub experts: usize,
    pub t_train: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            obs_dim: crate::envs::OBS_DIM,
            horizon: crate::envs::CHUNK_HORIZON,
            action_dim: crate::envs::ACTION_DIM,
            hidden: 128,
            obs_features: 64,
            blocks: 4,
            moe_every: 4,
            experts: 5,
            t_train: 50,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }

    /// Whether body block `i` is a mixture-of-experts layer. The routed
    /// block sits between shared ones: the third block of each group of `moe_every`.
    pub fn is_moe_block(&self, i: usize) -> bool {
        self.moe_every > 0 && i % self.moe_every == self.moe_every / 2
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("obs_dim", self.obs_dim),
            ("horizon", self.horizon),
            ("action_dim", self.action_dim),
            ("hidden", self.hidden),
            ("obs_features", self.obs_features),
            ("blocks", self.blocks),
            ("experts", self.experts),
        ];
        for (field, v) in checks {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.t_train < 2 {
            return Err(Error::config("t_train", "must be >= 2"));
        }
        Ok(())
    }
}

/// Pre-activation residual block: `h + W2 act(W1 [h + t, obs])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResBlock {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, hidden: usize, cond: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), hidden + cond, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, hidden, rng),
        }
    }

    /// The residual branch `W2 act(W1 [h + t, obs])`.
    fn branch<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, h: Var, t: Var, obs: Var, act: Activation) -> Result<Var> {
        let x = tape.add(h, t)?;
        let x = tape.concat_cols(&[x, obs])?;
        let x = self.fc1.forward(tape, store, x)?;
        let x = tape.activate(x, act);
        self.fc2.forward(tape, store, x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.fc1.params(), self.fc2.params()].concat()
    }
}

/// `K` identically shaped residual sub-blocks; a forward pass runs exactly
/// one of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoELayer {
    pub experts: Vec<ResBlock>,
}

impl MoELayer {
    pub fn expert_params(&self, e: usize) -> Vec<ParamId> {
        self.experts[e].params()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Block {
    Shared(ResBlock),
    Moe(MoELayer),
}

/// Noise predictor `f(a^k, o, k, e)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePredictor {
    pub config: ModelConfig,
    /// `[T, hidden]` learned step embedding.
    pub time_embed: ParamId,
    pub obs_proj: Linear,
    pub in_proj: Linear,
    pub blocks: Vec<Block>,
    pub out_proj: Linear,
}

impl NoisePredictor {
    pub fn new(store: &mut ParamStore, name: &str, config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (h, f) = (config.hidden, config.obs_features);
        let emb: Vec<f32> = (0..config.t_train * h).map(|_| rng.random_range(-0.1..0.1)).collect();
        let time_embed = store.add(format!("{name}.time_embed"), Tensor::matrix(config.t_train, h, emb)?);
        let obs_proj = Linear::new(store, &format!("{name}.obs_proj"), config.obs_dim, f, rng);
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), config.chunk_len(), h, rng);
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            if config.is_moe_block(i) {
                let experts = (0..config.experts)
                    .map(|e| ResBlock::new(store, &format!("{name}.block{i}.expert{e}"), h, f, rng))
                    .collect();
                blocks.push(Block::Moe(MoELayer { experts }));
            } else {
                blocks.push(Block::Shared(ResBlock::new(store, &format!("{name}.block{i}"), h, f, rng)));
            }
        }
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), h, config.chunk_len(), rng);
        Ok(Self {
            config,
            time_embed,
            obs_proj,
            in_proj,
            blocks,
            out_proj,
        })
    }

    pub fn experts(&self) -> usize {
        self.config.experts
    }

    /// Records the forward pass for a batch routed entirely to expert `e`.
    /// `a_k: [B, H*A]`, `obs: [B, D]`, one diffusion step per row.
    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        a_k: Var,
        obs: Var,
        ks: &[usize],
        e: usize,
    ) -> Result<Var> {
        Ok(self.forward_routed(tape, store, a_k, obs, ks, Route::Expert(e))?.0)
    }

    /// Forward pass under an arbitrary routing rule. Returns the output and,
    /// for gated routing, one record per mixture layer.
    pub fn forward_routed<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        a_k: Var,
        obs: Var,
        ks: &[usize],
        route: Route<'_>,
    ) -> Result<(Var, Vec<GateRecord>)> {
        let cfg = &self.config;
        let (ta, to) = (tape.value(a_k), tape.value(obs));
        let rows = ta.rows();
        if ta.cols() != cfg.chunk_len() || to.cols() != cfg.obs_dim || to.rows() != rows || ks.len() != rows {
            return Err(Error::dim(
                "predict_noise",
                format!("[B, {}] chunks, [B, {}] obs, B steps", cfg.chunk_len(), cfg.obs_dim),
                format!("{:?}, {:?}, {}", ta.shape(), to.shape(), ks.len()),
            ));
        }
        match route {
            Route::Expert(e) if e >= cfg.experts => {
                return Err(Error::contract(format!("expert {e} out of range [0, {})", cfg.experts)));
            }
            Route::PerRow(es) => {
                if es.len() != rows {
                    return Err(Error::dim("per-row routing", rows, es.len()));
                }
                if let Some(&e) = es.iter().find(|&&e| e >= cfg.experts) {
                    return Err(Error::contract(format!("expert {e} out of range [0, {})", cfg.experts)));
                }
            }
            Route::Gated(gates) if gates.len() != self.moe_layers() => {
                return Err(Error::dim("per-layer gates", self.moe_layers(), gates.len()));
            }
            _ => {}
        }
        if let Some(&k) = ks.iter().find(|&&k| k >= cfg.t_train) {
            return Err(Error::contract(format!("diffusion step {k} outside [0, {})", cfg.t_train)));
        }
        let act = cfg.activation;
        let table = tape.param(store, self.time_embed);
        let t = tape.gather_rows(table, ks)?;
        let o = self.obs_proj.forward(tape, store, obs)?;
        let o = tape.activate(o, act);
        let mut h = self.in_proj.forward(tape, store, a_k)?;
        let mut records = Vec::new();
        let mut layer = 0;
        for block in &self.blocks {
            let branch = match block {
                Block::Shared(b) => b.branch(tape, store, h, t, o, act)?,
                Block::Moe(m) => {
                    let out = match route {
                        Route::Expert(e) => m.experts[e].branch(tape, store, h, t, o, act)?,
                        Route::PerRow(es) => {
                            let weights: Vec<Vec<f32>> = (0..cfg.experts)
                                .map(|e| es.iter().map(|&r| if r == e { 1.0 } else { 0.0 }).collect())
                                .collect();
                            mix_experts(tape, store, m, h, t, o, act, &weights, None)?
                        }
                        Route::Gated(gates) => {
                            let logits = gates[layer].forward(tape, store, h)?;
                            let logp = tape.log_softmax(logits, Axis::Rows);
                            let probs = tape.exp(logp);
                            let p = tape.value(probs);
                            let chosen: Vec<usize> = (0..rows).map(|r| argmax(p.row(r))).collect();
                            let weights: Vec<Vec<f32>> = (0..cfg.experts)
                                .map(|e| chosen.iter().map(|&c| if c == e { 1.0 } else { 0.0 }).collect())
                                .collect();
                            let out = mix_experts(tape, store, m, h, t, o, act, &weights, Some(probs))?;
                            records.push(GateRecord { probs, chosen });
                            out
                        }
                    };
                    layer += 1;
                    out
                }
            };
            h = tape.add(h, branch)?;
        }
        let h = tape.activate(h, act);
        Ok((self.out_proj.forward(tape, store, h)?, records))
    }

    pub fn moe_layers(&self) -> usize {
        self.blocks.iter().filter(|b| matches!(b, Block::Moe(_))).count()
    }

    /// Forward pass without gradient bookkeeping.
    pub fn predict_noise(&self, store: &ParamStore, a_k: &Tensor, obs: &Tensor, ks: &[usize], e: usize) -> Result<Tensor> {
        self.predict_noise_routed(store, a_k, obs, ks, Route::Expert(e))
    }

    pub fn predict_noise_routed(
        &self,
        store: &ParamStore,
        a_k: &Tensor,
        obs: &Tensor,
        ks: &[usize],
        route: Route<'_>,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let a = tape.constant(a_k.clone());
        let o = tape.constant(obs.clone());
        let (y, _) = self.forward_routed(&mut tape, store, a, o, ks, route)?;
        Ok(tape.value(y).clone())
    }

    /// Parameters used by every expert.
    pub fn shared_params(&self) -> Vec<ParamId> {
        let mut p = vec![self.time_embed];
        p.extend(self.obs_proj.params());
        p.extend(self.in_proj.params());
        for b in &self.blocks {
            if let Block::Shared(b) = b {
                p.extend(b.params());
            }
        }
        p.extend(self.out_proj.params());
        p
    }

    /// Parameters owned by expert `e` across all mixture layers.
    pub fn expert_params(&self, e: usize) -> Vec<ParamId> {
        self.blocks
            .iter()
            .filter_map(|b| match b {
                Block::Moe(m) => Some(m.expert_params(e)),
                Block::Shared(_) => None,
            })
            .flatten()
            .collect()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.shared_params();
        for e in 0..self.config.experts {
            p.extend(self.expert_params(e));
        }
        p
    }
}

/// Routing rule for the mixture layers of one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Route<'a> {
    /// Every row uses expert `e`.
    Expert(usize),
    /// Row `i` uses expert `es[i]`.
    PerRow(&'a [usize]),
    /// Each mixture layer routes each row top-1 through its own gate, with
    /// the expert branch scaled by the gate probability.
    Gated(&'a [Linear]),
}

/// Gate output of one mixture layer under [`Route::Gated`].
#[derive(Clone, Debug)]
pub struct GateRecord {
    /// `[B, K]` gate probabilities (on the tape).
    pub probs: Var,
    pub chosen: Vec<usize>,
}

pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `sum_e w_e * branch_e(h)` over experts with any non-zero row weight,
/// where `w_e` is the constant mask `weights[e]`, times column `e` of
/// `probs` when given.
#[allow(clippy::too_many_arguments)]
fn mix_experts<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    m: &MoELayer,
    h: Var,
    t: Var,
    o: Var,
    act: Activation,
    weights: &[Vec<f32>],
    probs: Option<Var>,
) -> Result<Var> {
    let rows = weights[0].len();
    let k = weights.len();
    let mut acc: Option<Var> = None;
    for (e, w) in weights.iter().enumerate() {
        if w.iter().all(|&v| v == 0.0) {
            continue;
        }
        let branch = m.experts[e].branch(tape, store, h, t, o, act)?;
        let mut col = tape.constant(Tensor::matrix(rows, 1, w.clone())?);
        if let Some(p) = probs {
            let mut onehot = vec![0.0; k];
            onehot[e] = 1.0;
            let sel = tape.constant(Tensor::matrix(k, 1, onehot)?);
            let pe = tape.matmul(p, sel)?;
            col = tape.mul(pe, col)?;
        }
        let scaled = tape.mul_col(branch, col)?;
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    acc.ok_or_else(|| Error::contract("mixture layer with no routed rows"))
}

/// Per-row mean squared error between `pred` and `target`, as `[B, 1]`.
pub fn per_sample_mse(tape: &mut Tape<'_>, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d);
    Ok(tape.row_mean(sq))
}

/// Mean squared error of the noise prediction over the batch and all chunk
/// entries.
pub fn diffusion_loss<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    model: &NoisePredictor,
    batch: &NoisedBatch,
    e: usize,
) -> Result<Var> {
    if batch.ks.is_empty() {
        return Err(Error::contract("diffusion loss over an empty batch"));
    }
    let a = tape.constant(batch.noisy.clone());
    let o = tape.constant(batch.obs.clone());
    let eps = tape.constant(batch.eps.clone());
    let pred = model.forward(tape, store, a, o, &batch.ks, e)?;
    let d = tape.sub(pred, eps)?;
    let sq = tape.square(d);
    Ok(tape.mean_all(sq))
}

/// Observations, noised chunks, the noise that produced them, and their
/// diffusion steps.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedBatch {
    pub obs: Tensor,
    pub noisy: Tensor,
    pub eps: Tensor,
    pub ks: Vec<usize>,
}

impl NoisedBatch {
    pub fn len(&self) -> usize {
        self.ks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ks.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            obs: self.obs.select_rows(idx),
            noisy: self.noisy.select_rows(idx),
            eps: self.eps.select_rows(idx),
            ks: idx.iter().map(|&i| self.ks[i]).collect(),
        }
    }
}
