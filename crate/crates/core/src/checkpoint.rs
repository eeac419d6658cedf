//! Binary checkpoints: model spec, parameters, optimizer moments and RNG state.
//!
//! All integers and floats are little-endian. Layout:
//! magic `DANPCKPT`, `u32` version, 32-byte SHA-256 of the spec text,
//! `u32` spec length and spec text, schedule (`u64` levels, `f64` beta,
//! `f64` sigma2), `u64` step, RNG (32-byte seed, `u64` stream, `u128` word
//! position), `u32` array count, then per array: `u32` name length, name,
//! `u32` rank, `u64` dims, `f64` values. Arrays are named `param/..`,
//! `adam_m/..` and `adam_v/..`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffgrid::{Array, ParamStore};
use crate::error::{Error, Result};
use crate::models::{ModelSpec, NeuralProcess};
use crate::train::{AdamState, TrainState};

pub const MAGIC: &[u8; 8] = b"DANPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("model spec hash does not match the stored spec")]
    HashMismatch,
    #[error("file is truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: TrainState,
}

impl Checkpoint {
    pub fn model(&self) -> &NeuralProcess {
        &self.state.model
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn array(&mut self, name: &str, a: &Array) {
        self.str(name);
        self.u32(a.shape.len() as u32);
        a.shape.iter().for_each(|&d| self.u64(d as u64));
        a.data.iter().for_each(|&v| self.f64(v));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

type CkResult<T> = std::result::Result<T, CheckpointError>;

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CkResult<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self) -> CkResult<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u32(&mut self) -> CkResult<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> CkResult<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> CkResult<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn str(&mut self) -> CkResult<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?)
            .map_err(|_| CheckpointError::Malformed("non-UTF-8 text".into()))
    }
    fn array(&mut self) -> CkResult<(String, Array)> {
        let name = self.str()?.to_string();
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<CkResult<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n =
            n.ok_or_else(|| CheckpointError::Malformed(format!("array `{name}` is too large")))?;
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(CheckpointError::Truncated);
        }
        let data = (0..n).map(|_| self.f64()).collect::<CkResult<Vec<_>>>()?;
        Ok((name, Array { shape, data }))
    }
}

pub fn checkpoint_to_bytes(state: &TrainState) -> Vec<u8> {
    let spec = state.model.spec();
    let text = spec.to_text();
    let mut w = Writer(Vec::new());
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.bytes(&spec.hash());
    w.str(&text);
    w.u64(spec.levels() as u64);
    w.f64(spec.schedule.beta());
    w.f64(spec.schedule.sigma2());
    w.u64(state.step);
    w.bytes(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.bytes(&state.rng.get_word_pos().to_le_bytes());
    let groups = [
        ("param", state.model.params()),
        ("adam_m", &state.adam.m),
        ("adam_v", &state.adam.v),
    ];
    w.u32(groups.iter().map(|(_, s)| s.len() as u32).sum());
    for (prefix, store) in groups {
        for (name, a) in store.iter() {
            w.array(&format!("{prefix}/{name}"), a);
        }
    }
    w.0
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> CkResult<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) {
            CheckpointError::Truncated
        } else {
            CheckpointError::BadMagic
        });
    }
    if r.take(MAGIC.len())? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let hash: [u8; 32] = r.arr()?;
    let text = r.str()?;
    let spec = ModelSpec::from_text(text).map_err(CheckpointError::Malformed)?;
    if spec.hash() != hash {
        return Err(CheckpointError::HashMismatch);
    }
    let (levels, beta, sigma2) = (r.u64()?, r.f64()?, r.f64()?);
    if levels != spec.levels() as u64
        || beta != spec.schedule.beta()
        || sigma2 != spec.schedule.sigma2()
    {
        return Err(CheckpointError::Malformed(
            "schedule disagrees with the model spec".into(),
        ));
    }
    let step = r.u64()?;
    let seed: [u8; 32] = r.arr()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.arr()?);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let count = r.u32()?;
    let mut stores = [ParamStore::new(), ParamStore::new(), ParamStore::new()];
    for _ in 0..count {
        let (name, array) = r.array()?;
        let (prefix, rest) = name.split_once('/').ok_or_else(|| {
            CheckpointError::Malformed(format!("array name `{name}` lacks a group"))
        })?;
        let slot = match prefix {
            "param" => 0,
            "adam_m" => 1,
            "adam_v" => 2,
            _ => {
                return Err(CheckpointError::Malformed(format!(
                    "unknown array group `{prefix}`"
                )))
            }
        };
        stores[slot]
            .insert(rest, array)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    let [params, m, v] = stores;
    if !params.same_layout(&m) || !params.same_layout(&v) {
        return Err(CheckpointError::Malformed(
            "optimizer moments are not shaped like the parameters".into(),
        ));
    }
    let model =
        NeuralProcess::new(spec, params).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok(Checkpoint {
        state: TrainState {
            model,
            adam: AdamState { m, v },
            step,
            rng,
        },
    })
}

pub fn checkpoint_save(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes).map_err(|source| Error::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}
