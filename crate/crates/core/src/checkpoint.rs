//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "CDGACKPT"
//! version      u32      currently 1
//! iteration    u64
//! config_hash  32 bytes SHA-256 of the config JSON below
//! config_len   u32, then config_len bytes of UTF-8 JSON {"model": .., "train": ..}
//! rng_seed     32 bytes ChaCha8 seed
//! rng_stream   u64
//! rng_word_pos u128
//! adam_steps   u64
//! n_arrays     u32, then per array:
//!   name_len u16, name (UTF-8), rank u8, rank x u64 dims, f64 data
//! ```
//!
//! Array names are prefixed by their role: `seg/`, `group/`, `group_buf/`,
//! `disc/`, `opt_g/`, `opt_c/`, `opt_d_m/`, `opt_d_v/`.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{ModelConfig, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"CDGACKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfigs {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfigs {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn hash(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.to_json()?.as_bytes()).into())
    }
}

fn ck(reason: impl Into<String>) -> Error {
    Error::Checkpoint(reason.into())
}

fn arrays_of(prefix: &str, store: &ParamStore, out: &mut Vec<(String, Tensor)>) {
    for (name, t) in store.iter() {
        out.push((format!("{prefix}/{name}"), t.clone()));
    }
}

fn named_state(prefix: &str, store: &ParamStore, state: &[Tensor], out: &mut Vec<(String, Tensor)>) {
    for ((name, _), t) in store.iter().zip(state) {
        out.push((format!("{prefix}/{name}"), t.clone()));
    }
}

fn collect_arrays(state: &TrainState) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    arrays_of("seg", state.seg.params(), &mut out);
    arrays_of("group", state.group.params(), &mut out);
    arrays_of("group_buf", state.group.buffers(), &mut out);
    arrays_of("disc", state.disc.params(), &mut out);
    named_state("opt_g", state.seg.params(), state.opt_g.state(), &mut out);
    named_state("opt_c", state.group.params(), state.opt_c.state(), &mut out);
    let (m, v) = state.opt_d.moments();
    named_state("opt_d_m", state.disc.params(), m, &mut out);
    named_state("opt_d_v", state.disc.params(), v, &mut out);
    out
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

/// Serializes the full training state.
pub fn encode(state: &TrainState, configs: &RunConfigs) -> Result<Vec<u8>> {
    let json = configs.to_json()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u64(&mut buf, state.iteration);
    buf.extend_from_slice(&configs.hash()?);
    put_u32(&mut buf, json.len() as u32);
    buf.extend_from_slice(json.as_bytes());
    buf.extend_from_slice(&state.rng.get_seed());
    put_u64(&mut buf, state.rng.get_stream());
    buf.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    put_u64(&mut buf, state.opt_d.steps);
    let arrays = collect_arrays(state);
    put_u32(&mut buf, arrays.len() as u32);
    for (name, t) in arrays {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            put_u64(&mut buf, d as u64);
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| ck("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

/// Parsed contents of a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub iteration: u64,
    pub configs: RunConfigs,
    pub rng: ChaCha8Rng,
    pub adam_steps: u64,
    pub arrays: Vec<(String, Tensor)>,
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(ck("not a checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(ck(format!("unsupported version {version}")));
    }
    let iteration = c.u64()?;
    let hash: [u8; 32] = c.array()?;
    let len = c.u32()? as usize;
    let json = std::str::from_utf8(c.take(len)?).map_err(|_| ck("config is not UTF-8"))?;
    if <[u8; 32]>::from(Sha256::digest(json.as_bytes())) != hash {
        return Err(ck("config hash mismatch"));
    }
    let configs: RunConfigs = serde_json::from_str(json)?;
    let mut rng = ChaCha8Rng::from_seed(c.array()?);
    rng.set_stream(c.u64()?);
    rng.set_word_pos(u128::from_le_bytes(c.array()?));
    let adam_steps = c.u64()?;
    let n = c.u32()? as usize;
    let mut arrays = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = c.u16()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec()).map_err(|_| ck("array name is not UTF-8"))?;
        let rank = c.u8()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = c.take(count.checked_mul(8).ok_or_else(|| ck("array too large"))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        arrays.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(ck("trailing bytes"));
    }
    Ok(Checkpoint {
        iteration,
        configs,
        rng,
        adam_steps,
        arrays,
    })
}

fn restore(prefix: &str, names: &ParamStore, targets: &mut [Tensor], arrays: &std::collections::HashMap<&str, &Tensor>) -> Result<()> {
    for ((name, _), t) in names.iter().zip(targets.iter_mut()) {
        let key = format!("{prefix}/{name}");
        let src = arrays.get(key.as_str()).ok_or_else(|| ck(format!("missing array {key}")))?;
        if src.shape() != t.shape() {
            return Err(ck(format!("{key}: shape {:?}, expected {:?}", src.shape(), t.shape())));
        }
        *t = (*src).clone();
    }
    Ok(())
}

fn restore_store(prefix: &str, store: &mut ParamStore, arrays: &std::collections::HashMap<&str, &Tensor>) -> Result<()> {
    let names = store.clone();
    let mut tensors: Vec<Tensor> = names.iter().map(|(_, t)| t.clone()).collect();
    restore(prefix, &names, &mut tensors, arrays)?;
    for (dst, src) in store.tensors_mut().zip(tensors) {
        *dst = src;
    }
    Ok(())
}

impl Checkpoint {
    /// Rebuilds the training state this checkpoint was taken from.
    pub fn into_state(self) -> Result<(TrainState, RunConfigs)> {
        let mut state = TrainState::new(&self.configs.model, &self.configs.train)?;
        let arrays: std::collections::HashMap<&str, &Tensor> = self.arrays.iter().map(|(n, t)| (n.as_str(), t)).collect();
        restore_store("seg", state.seg.params_mut(), &arrays)?;
        restore_store("group", state.group.params_mut(), &arrays)?;
        restore_store("group_buf", state.group.buffers_mut(), &arrays)?;
        restore_store("disc", state.disc.params_mut(), &arrays)?;
        restore("opt_g", state.seg.params(), state.opt_g.state_mut(), &arrays)?;
        restore("opt_c", state.group.params(), state.opt_c.state_mut(), &arrays)?;
        let (m, v) = state.opt_d.moments_mut();
        restore("opt_d_m", state.disc.params(), m, &arrays)?;
        restore("opt_d_v", state.disc.params(), v, &arrays)?;
        state.opt_d.steps = self.adam_steps;
        state.iteration = self.iteration;
        state.rng = self.rng;
        Ok((state, self.configs))
    }
}

pub fn save(path: &Path, state: &TrainState, configs: &RunConfigs) -> Result<()> {
    let bytes = encode(state, configs)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // write then rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(reason) => ck(format!("{}: {reason}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seg_model::SegModelConfig;

    fn configs() -> RunConfigs {
        RunConfigs {
            model: ModelConfig {
                seg: SegModelConfig {
                    channels: vec![3],
                    strides: vec![1],
                    ..Default::default()
                },
                group_hidden: 2,
                disc_widths: [2, 2, 2, 2],
                ..Default::default()
            },
            train: TrainConfig {
                groups: 2,
                total_iters: 10,
                ..Default::default()
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = configs();
        let mut state = TrainState::new(&cfg.model, &cfg.train).unwrap();
        state.iteration = 4;
        state.opt_d.steps = 4;
        let _: u32 = rand::Rng::random(&mut state.rng);
        let bytes = encode(&state, &cfg).unwrap();
        let (back, cfg2) = decode(&bytes).unwrap().into_state().unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(encode(&back, &cfg2).unwrap(), bytes);
        assert_eq!(back.rng, state.rng);
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = configs();
        let state = TrainState::new(&cfg.model, &cfg.train).unwrap();
        let bytes = encode(&state, &cfg).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut tampered = bytes.clone();
        // first byte of the config JSON
        tampered[8 + 4 + 8 + 32 + 4] ^= 1;
        assert!(matches!(decode(&tampered), Err(Error::Checkpoint(_))));
    }
}
