//! Versioned checkpoint container.
//!
//! ```text
//! "BRCK" | u32 version
//! u32 len | canonical config text (key=value lines)
//! u32 len | model config hash (hex)
//! u64 step | u64 seed | u64 adam_t
//! u32 count, then per parameter:
//!   u32 len | name | u32 ndim | u32 dims[ndim] | f64 value[] | f64 m[] | f64 v[]
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use brainformer_tensor::Tensor;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::optim::AdamState;

pub const MAGIC: &[u8; 4] = b"BRCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    pub adam: AdamState,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid utf-8".to_string())
    }

    fn floats(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("size overflow")?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_floats(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config.to_text());
        put_str(&mut out, &self.config.model_hash());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.config.seed.to_le_bytes());
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (i, (name, t)) in self.params.iter().enumerate() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_floats(&mut out, t.data());
            put_floats(&mut out, self.adam.m[i].data());
            put_floats(&mut out, self.adam.v[i].data());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic (not a checkpoint)".into());
        }
        let version = r.u32()? as u32;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let text = r.string()?;
        let config = TrainConfig::parse_text(&text).map_err(|e| e.to_string())?;
        let hash = r.string()?;
        if hash != config.model_hash() {
            return Err(format!(
                "config hash {hash} does not match stored config ({})",
                config.model_hash()
            ));
        }
        let step = r.u64()?;
        let seed = r.u64()?;
        if seed != config.seed {
            return Err(format!("seed {seed} differs from config seed {}", config.seed));
        }
        let t = r.u64()?;
        let count = r.u32()?;
        let mut params = Vec::with_capacity(count);
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("size overflow")?;
            let tensor = |data| Tensor::new(shape.clone(), data).map_err(|e| format!("{name}: {e}"));
            params.push((name.clone(), tensor(r.floats(n)?)?));
            m.push(tensor(r.floats(n)?)?);
            v.push(tensor(r.floats(n)?)?);
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Checkpoint {
            config,
            step,
            params,
            adam: AdamState { m, v, t },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write then rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|reason| Error::format(path, reason))
    }
}
