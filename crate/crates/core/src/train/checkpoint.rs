//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "RASM" | version u32 | config_len u64 | config (UTF-8 TOML) | step u64
//! | tensor list (parameters)
//! | has_optimizer u8 [ | opt_step u64 | tensor list (m) | tensor list (v) ]
//!
//! tensor list = count u64, then per tensor:
//!   path_len u32 | path | dtype u8 (0 = f32, 1 = f64) | ndim u32 | dims u64.. | payload
//! ```
//!
//! Tensors are written in path order, so equal checkpoints serialize to
//! equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use rasm_tensor::Tensor;

use super::config::RunConfig;
use super::optim::OptimizerState;
use crate::error::{Error, Result};
use crate::network::ParameterSet;

pub const MAGIC: &[u8; 4] = b"RASM";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Number of completed optimizer steps.
    pub step: u64,
    pub params: ParameterSet<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

fn write_tensors<'a>(out: &mut Vec<u8>, tensors: impl Iterator<Item = (&'a String, &'a Tensor<f32>)>) {
    let tensors: Vec<_> = tensors.collect();
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (path, t) in tensors {
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn tensors(&mut self) -> Result<BTreeMap<String, Tensor<f32>>> {
        let count = self.len()?;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let n = self.u32()? as usize;
            let path = self.string(n)?;
            let dtype = self.u8()?;
            let ndim = self.u32()? as usize;
            let shape = (0..ndim).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("{path}: shape overflows")))?;
            let data: Vec<f32> = match dtype {
                DTYPE_F32 => self.take(numel * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                DTYPE_F64 => self
                    .take(numel * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
                    .collect(),
                other => return Err(Error::Checkpoint(format!("{path}: unknown dtype tag {other}"))),
            };
            if out.insert(path.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {path}")));
            }
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = self.config.to_toml();
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        write_tensors(&mut out, self.params.iter());
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                write_tensors(&mut out, opt.m.iter());
                write_tensors(&mut out, opt.v.iter());
            }
        }
        out
    }

    /// Parses a checkpoint. The parameters are not checked against the model
    /// config here (see [`Checkpoint::load`]), so files holding other tensor
    /// sets, e.g. extractor weights, can be read too.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("bad magic bytes; not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let n = r.len()?;
        let text = r.string(n)?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("config blob: {}", e.message())))?;
        let step = r.u64()?;
        let mut params = ParameterSet::new();
        for (k, t) in r.tensors()? {
            params.insert(k, t)?;
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                Some(OptimizerState { step, m: r.tensors()?, v: r.tensors()? })
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, step, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write-then-rename keeps the previous file intact if writing fails
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Reads a model checkpoint and checks it against its own config.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Self::load_unchecked(path)?;
        ck.params.check_against(&ck.config.model)?;
        if let Some(opt) = &ck.optimizer {
            opt.check_against(&ck.params)?;
        }
        Ok(ck)
    }

    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
