//! Binary dataset container: magic `DIBM`, `u16` version, `u32` dims and
//! task count, normalization stats, then a `u32` pair count followed by
//! length-prefixed pair records. Little-endian throughout.

use std::fs;
use std::path::Path;

use super::dataset::{Dataset, NormStats};
use super::demo::Pair;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"DIBM";
pub const DATASET_VERSION: u16 = 1;

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [d.obs_dim, d.horizon, d.action_dim, d.task_count] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for block in [&d.stats.obs_min, &d.stats.obs_max, &d.stats.act_min, &d.stats.act_max] {
        put_f32s(&mut out, block);
    }
    out.extend_from_slice(&(d.pairs.len() as u32).to_le_bytes());
    for p in &d.pairs {
        let len = 16 + 4 * (p.obs.len() + p.chunk.len());
        out.extend_from_slice(&(len as u32).to_le_bytes());
        for v in [p.task_id, p.episode, p.phase, p.timestep] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_f32s(&mut out, &p.obs);
        put_f32s(&mut out, &p.chunk);
    }
    out
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Bounds-checked little-endian reader.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Truncated(what.into()))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn magic(&mut self, expected: &[u8]) -> Result<()> {
        let found = self.take(expected.len(), "magic")?;
        if found != expected {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Truncated(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(buf);
    r.magic(DATASET_MAGIC)?;
    let version = r.u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let obs_dim = r.u32("obs_dim")? as usize;
    let horizon = r.u32("horizon")? as usize;
    let action_dim = r.u32("action_dim")? as usize;
    let task_count = r.u32("task_count")? as usize;
    let stats = NormStats {
        obs_min: r.f32s(obs_dim, "obs_min")?,
        obs_max: r.f32s(obs_dim, "obs_max")?,
        act_min: r.f32s(action_dim, "act_min")?,
        act_max: r.f32s(action_dim, "act_max")?,
    };
    let n = r.u32("pair count")? as usize;
    let chunk_len = horizon * action_dim;
    let record_len = 16 + 4 * (obs_dim + chunk_len);
    let mut pairs = Vec::with_capacity(n.min(buf.len() / record_len.max(1)));
    for i in 0..n {
        let len = r.u32("record length")? as usize;
        if len != record_len {
            return Err(Error::Truncated(format!("pair {i}: record length {len}, expected {record_len}")));
        }
        pairs.push(Pair {
            task_id: r.u32("task_id")?,
            episode: r.u32("episode")?,
            phase: r.u32("phase")?,
            timestep: r.u32("timestep")?,
            obs: r.f32s(obs_dim, "obs")?,
            chunk: r.f32s(chunk_len, "chunk")?,
        });
    }
    r.finish()?;
    Ok(Dataset {
        obs_dim,
        horizon,
        action_dim,
        task_count,
        stats,
        pairs,
    })
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(d)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build_suite, generate_dataset};

    #[test]
    fn empty_dataset_is_header_only() {
        let d = Dataset::new(6, Vec::new());
        let bytes = encode_dataset(&d);
        assert_eq!(bytes.len(), 4 + 2 + 16 + 4 * (2 * 16 + 2 * 3) + 4);
        assert_eq!(decode_dataset(&bytes).unwrap(), d);
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let d = generate_dataset(&build_suite(0), 3, 0).unwrap().dataset;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&d, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.len(), d.len());
        assert_eq!(back.stats, d.stats);
        for (a, b) in back.pairs.iter().zip(&d.pairs) {
            assert!(a.chunk.iter().zip(&b.chunk).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.obs.iter().zip(&b.obs).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn three_hundred_pairs_round_trip() {
        let d = generate_dataset(&build_suite(0), 12, 0).unwrap().dataset;
        let d = Dataset::with_stats(d.task_count, d.pairs[..300].to_vec(), d.stats.clone());
        let back = decode_dataset(&encode_dataset(&d)).unwrap();
        assert_eq!(back.len(), 300);
        assert_eq!(back.stats, d.stats);
    }

    #[test]
    fn corrupt_inputs_give_distinct_errors() {
        let d = generate_dataset(&build_suite(0)[..1], 1, 0).unwrap().dataset;
        let good = encode_dataset(&d);

        let mut bad = good.clone();
        bad[0] = b'X';
        match decode_dataset(&bad) {
            Err(Error::BadMagic { expected, .. }) => assert_eq!(expected, "DIBM"),
            other => panic!("{other:?}"),
        }

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_dataset(&bad), Err(Error::Version { expected: 1, found: 9 })));

        assert!(matches!(decode_dataset(&good[..good.len() - 3]), Err(Error::Truncated(_))));
    }
}
