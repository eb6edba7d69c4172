//! Checkpoint container: magic `DIBMCKPT`, `u16` version, then the config
//! as TOML, data dims, normalization stats, optional log-partition, rng
//! state, iteration count and named tensors. Little-endian throughout.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::envs::io::Reader;
use crate::envs::NormStats;
use crate::error::{Error, Result};
use crate::gating::LogPartition;
use crate::numeric::Tensor;
use crate::trainer::{BehaviorModel, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DIBMCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A trained model with the config and rng state that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: BehaviorModel,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Self {
            config: state.cfg.clone(),
            model: state.model.clone(),
            rng: state.rng.clone(),
            iteration: state.iteration,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len());
    out.extend_from_slice(b);
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    put_u32(out, xs.len());
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_bytes(&mut out, c.config.to_toml().as_bytes());
    let mc = c.model.model_config();
    for v in [mc.obs_dim, mc.horizon, mc.action_dim] {
        put_u32(&mut out, v);
    }
    let s = &c.model.stats;
    for block in [&s.obs_min, &s.obs_max, &s.act_min, &s.act_max] {
        put_f32s(&mut out, block);
    }
    match &c.model.log_z {
        None => out.push(0),
        Some(z) => {
            out.push(1);
            out.extend_from_slice(&(z.samples as u64).to_le_bytes());
            put_f32s(&mut out, &z.log_z);
        }
    }
    out.extend_from_slice(&c.rng.get_seed());
    out.extend_from_slice(&c.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&c.rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&c.iteration.to_le_bytes());
    put_u32(&mut out, c.model.store.len());
    for (_, name, t) in c.model.store.iter() {
        put_bytes(&mut out, name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn string(r: &mut Reader<'_>, what: &str) -> Result<String> {
    let n = r.u32(what)? as usize;
    String::from_utf8(r.take(n, what)?.to_vec()).map_err(|e| Error::Truncated(format!("{what}: {e}")))
}

fn f32_block(r: &mut Reader<'_>, expected: usize, what: &str) -> Result<Vec<f32>> {
    let n = r.u32(what)? as usize;
    if n != expected {
        return Err(Error::dim("checkpoint block", format!("{expected} values in {what}"), n));
    }
    r.f32s(n, what)
}

/// Decodes a checkpoint and rebuilds the model it describes. Every stored
/// tensor must match the architecture implied by the stored config in
/// name, order and shape.
pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(buf);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let config = TrainConfig::from_toml(&string(&mut r, "config")?)?;
    let obs_dim = r.u32("obs_dim")? as usize;
    let horizon = r.u32("horizon")? as usize;
    let action_dim = r.u32("action_dim")? as usize;
    let stats = NormStats {
        obs_min: f32_block(&mut r, obs_dim, "obs_min")?,
        obs_max: f32_block(&mut r, obs_dim, "obs_max")?,
        act_min: f32_block(&mut r, action_dim, "act_min")?,
        act_max: f32_block(&mut r, action_dim, "act_max")?,
    };
    let log_z = match r.take(1, "log-partition flag")?[0] {
        0 => None,
        1 => {
            let samples = r.u64("log-partition samples")? as usize;
            Some(LogPartition {
                samples,
                log_z: f32_block(&mut r, config.experts, "log-partition")?,
            })
        }
        f => return Err(Error::Truncated(format!("log-partition flag {f}"))),
    };
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
    let stream = r.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let iteration = r.u64("iteration")?;

    let mc = config.model_config(obs_dim, horizon, action_dim);
    let mut model = BehaviorModel::with_model_config(&config, mc, stats)?;
    model.log_z = log_z;
    let count = r.u32("tensor count")? as usize;
    if count != model.store.len() {
        return Err(Error::contract(format!(
            "checkpoint holds {count} tensors, architecture has {}",
            model.store.len()
        )));
    }
    for id in 0..count {
        let name = string(&mut r, "tensor name")?;
        let expected_name = model.store.name(id).to_string();
        if name != expected_name {
            return Err(Error::TensorShape {
                name,
                reason: format!("found where `{expected_name}` was expected"),
            });
        }
        let ndim = r.u32("tensor rank")? as usize;
        let shape = (0..ndim).map(|_| r.u32("tensor dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let target = model.store.get_mut(id);
        if shape != target.shape() {
            return Err(Error::TensorShape {
                name,
                reason: format!("stored shape {shape:?}, architecture expects {:?}", target.shape()),
            });
        }
        let data = r.f32s(target.len(), &name)?;
        *target = Tensor::new(shape, data)?;
    }
    r.finish()?;
    Ok(Checkpoint {
        config,
        model,
        rng,
        iteration,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(c)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
