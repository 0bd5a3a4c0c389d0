use std::collections::BTreeMap;
use std::path::Path;

use super::{TensorMap, TrainConfig};
use crate::data::io::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RNET";
pub const CHECKPOINT_VERSION: u32 = 1;

const MOMENTUM_PREFIX: &str = "momentum.";

/// Complete training state.
///
/// Layout (little-endian): magic, `u32` version, `u32`-length-prefixed JSON
/// of the model and training configs, `u32` tensor count, then per tensor a
/// `u32`-length-prefixed path, `u8` rank, `rank` x `u64` dims and the `f32`
/// payload; finally `u64` step and `u64` generator state. Parameters come
/// first, then momentum buffers under `momentum.<path>`, each in path order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub step: u64,
    pub params: ModelParams,
    pub momentum: TensorMap,
    pub rng_state: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.model_config.to_json());
        put_str(&mut out, &self.train_config.to_json());
        let count = self.params.len() + self.momentum.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (path, t) in self.params.iter() {
            put_tensor(&mut out, path, t);
        }
        for (path, t) in &self.momentum {
            put_tensor(&mut out, &format!("{MOMENTUM_PREFIX}{path}"), t);
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng_state.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "magic mismatch: expected {:?}, found {:?}",
                String::from_utf8_lossy(CHECKPOINT_MAGIC),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version mismatch: expected {CHECKPOINT_VERSION}, found {version}"
            )));
        }
        let model_config: ModelConfig = serde_json::from_str(&r.string("model config")?)?;
        let train_config: TrainConfig = serde_json::from_str(&r.string("train config")?)?;
        model_config.validate()?;

        let count = r.u32("tensor count")? as usize;
        let mut params = BTreeMap::new();
        let mut momentum = BTreeMap::new();
        for _ in 0..count {
            let path = r.string("tensor path")?;
            let rank = r.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(
                    usize::try_from(r.u64("dimension")?).map_err(|_| {
                        Error::Checkpoint(format!("dimension of `{path}` overflows"))
                    })?,
                );
            }
            let len = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint(format!("size of `{path}` overflows")))?;
            let data = r
                .take(len, "tensor payload")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            let t = Tensor::new(dims, data)?;
            let target = match path.strip_prefix(MOMENTUM_PREFIX) {
                Some(p) => momentum.insert(p.to_string(), t),
                None => params.insert(path.clone(), t),
            };
            if target.is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{path}`")));
            }
        }
        let step = r.u64("step counter")?;
        let rng_state = r.u64("generator state")?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the generator state",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model_config,
            train_config,
            step,
            params: ModelParams::from_map(params),
            momentum,
            rng_state,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::file(path, format!("checkpoint format error: {msg}")),
        other => other,
    })
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, path: &str, t: &Tensor<f32>) {
    put_str(out, path);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!(
                "truncated file: {what} needs {n} bytes at offset {}, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}
