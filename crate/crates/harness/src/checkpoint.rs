//! Binary checkpoint format (little-endian):
//!
//! ```text
//! "SLPC" | version u16 | trajectory hash [32] | config length u32 | config TOML
//! | step u64 | optimizer step u64 | parameter count u32
//! | per parameter: name length u16 | name | rank u8 | dims u32* | values f64*
//! | per parameter: first moment f64* | second moment f64*
//! ```

use std::path::Path;

use slp_core::nn::ParamStore;
use slp_core::optim::Adam;
use slp_core::{Error, Tensor};

use crate::config::RunConfig;
use crate::error::HarnessError;

pub const MAGIC: &[u8; 4] = b"SLPC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: ParamStore<f64>,
    pub optimizer: Adam<f64>,
}

fn put_tensor_values(out: &mut Vec<u8>, t: &Tensor<f64>) {
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend(self.config.trajectory_hash());
        let text = self.config.to_toml();
        out.extend((text.len() as u32).to_le_bytes());
        out.extend(text.as_bytes());
        out.extend(self.step.to_le_bytes());
        out.extend(self.optimizer.step.to_le_bytes());
        out.extend((self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend((name.len() as u16).to_le_bytes());
            out.extend(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend((d as u32).to_le_bytes());
            }
            put_tensor_values(&mut out, t);
        }
        for (m, v) in self.optimizer.first_moment.iter().zip(&self.optimizer.second_moment) {
            put_tensor_values(&mut out, m);
            put_tensor_values(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HarnessError> {
        let mut r = Reader { bytes, offset: 0 };
        if r.take(4)? != MAGIC {
            return Err(format_err(0, "bad magic bytes, expected SLPC"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(format_err(4, &format!("unsupported version {version}")));
        }
        let hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let len = r.u32()? as usize;
        let at = r.offset;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| format_err(at, "config is not UTF-8"))?;
        let config: RunConfig = toml::from_str(text).map_err(|e| format_err(at, &e.to_string()))?;
        if config.trajectory_hash() != hash {
            return Err(format_err(6, "embedded config does not match its hash"));
        }
        let step = r.u64()?;
        let opt_step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let at = r.offset;
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| format_err(at, "parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<_, _>>()?;
            let t = r.tensor(&shape)?;
            params.add(name, t);
        }
        let mut optimizer = Adam::new(&params);
        optimizer.step = opt_step;
        for i in 0..count {
            let shape = params.values()[i].shape().to_vec();
            optimizer.first_moment[i] = r.tensor(&shape)?;
            optimizer.second_moment[i] = r.tensor(&shape)?;
        }
        if r.offset != bytes.len() {
            return Err(format_err(r.offset, "trailing bytes"));
        }
        Ok(Self {
            config,
            step,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(path)
            .map_err(|e| HarnessError::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn format_err(offset: usize, message: &str) -> HarnessError {
    Error::Format {
        offset: offset as u64,
        message: message.to_string(),
    }
    .into()
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HarnessError> {
        let end = self.offset.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format_err(self.offset, &format!("truncated: needed {n} more bytes")));
        };
        let s = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, HarnessError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, HarnessError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, HarnessError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, HarnessError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor<f64>, HarnessError> {
        let at = self.offset;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| format_err(at, "tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| format_err(at, &e.to_string()))
    }
}
