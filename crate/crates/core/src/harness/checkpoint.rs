//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "OGN1"  u32 version  u8 stage  u64 seed
//! u32 len, network config as TOML
//! u32 count, then per parameter:
//!     u32 len, name   u32 ndim, u32 dims…   f32 values…
//! u8 has_optimizer, then per trainable parameter if set:
//!     u32 ndim, u32 dims…   f32 velocity…
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig};
use crate::pipeline::{Sgd, Stage};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OGN1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub seed: u64,
    pub stage: Stage,
    pub optimizer: Option<Sgd<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    put_u32(out, t.shape().len());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(u8::from(self.stage));
        out.extend_from_slice(&self.seed.to_le_bytes());
        let cfg = self.model.config().to_toml();
        put_u32(&mut out, cfg.len());
        out.extend_from_slice(cfg.as_bytes());
        put_u32(&mut out, self.model.params.len());
        for (_, p) in self.model.params.iter() {
            put_u32(&mut out, p.name.len());
            out.extend_from_slice(p.name.as_bytes());
            put_tensor(&mut out, &p.value);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                for v in &opt.velocity {
                    put_tensor(&mut out, v);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let stage = Stage::try_from(r.u8()?).map_err(Error::Format)?;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let config = NetworkConfig::from_toml(text).map_err(|e| Error::Format(e.to_string()))?;
        let mut model = Model::<f32>::build(&config, 0)?;

        let count = r.u32()? as usize;
        if count != model.params.len() {
            return Err(Error::Format(format!(
                "{count} parameters stored, config defines {}",
                model.params.len()
            )));
        }
        let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let len = r.u32()? as usize;
            let name = r.take(len)?;
            let expected = model.params.get(id);
            if name != expected.name.as_bytes() {
                return Err(Error::Format(format!(
                    "parameter {} stored as {:?}",
                    expected.name,
                    String::from_utf8_lossy(name)
                )));
            }
            let t = r.tensor()?;
            if t.shape() != expected.value.shape() {
                return Err(Error::Format(format!("{} has shape {:?}", expected.name, t.shape())));
            }
            *model.params.value_mut(id) = t;
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let mut opt = Sgd::new(&model.params);
                for v in &mut opt.velocity {
                    let t = r.tensor()?;
                    if t.shape() != v.shape() {
                        return Err(Error::Format("optimizer state does not match the parameters".into()));
                    }
                    *v = t;
                }
                Some(opt)
            }
            f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            model,
            seed,
            stage,
            optimizer,
        })
    }

    /// Rejects checkpoints whose network differs from `config`.
    pub fn expect_config(self, config: &NetworkConfig) -> Result<Checkpoint> {
        if self.model.config() != config {
            return Err(Error::ConfigMismatch);
        }
        Ok(self)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("tensor with {ndim} dimensions")));
        }
        let shape = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = self.take(numel.checked_mul(4).ok_or(Error::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}
