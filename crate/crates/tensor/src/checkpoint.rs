//! Single-file binary checkpoints.
//!
//! ```text
//! magic     8 bytes  "GPLACKPT"
//! version   u32      FORMAT_VERSION
//! meta      u32 len + UTF-8 bytes (free-form, e.g. model config JSON)
//! manifest  u32 count, then per parameter:
//!             u32 name len, name, u32 ndim, u64 dims.., u64 offset, u64 numel
//! optim     u8 flag; if 1: u8 kind, f32 lr, beta1, beta2, eps, weight_decay, u64 step
//! payload   little-endian f32 values at manifest offsets (bytes from payload start)
//! moments   if optim: first moments then second moments, manifest order
//! ```
//! All integers little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GPLACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub metadata: String,
    pub params: ParamStore<f32>,
    pub optimizer: Option<Optimizer>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(metadata: &str, params: &ParamStore<f32>, optimizer: Option<&Optimizer>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, metadata.len() as u32);
    buf.extend_from_slice(metadata.as_bytes());
    put_u32(&mut buf, params.len() as u32);
    let mut offset = 0u64;
    for (_, p) in params.iter() {
        put_u32(&mut buf, p.name.len() as u32);
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.value.shape().len() as u32);
        for &d in p.value.shape() {
            put_u64(&mut buf, d as u64);
        }
        put_u64(&mut buf, offset);
        put_u64(&mut buf, p.value.len() as u64);
        offset += 4 * p.value.len() as u64;
    }
    match optimizer {
        Some(o) => {
            buf.push(1);
            buf.push(match o.kind {
                OptimizerKind::Adam => 0,
                OptimizerKind::AdamW => 1,
            });
            put_f32s(&mut buf, &[o.lr, o.beta1, o.beta2, o.eps, o.weight_decay]);
            put_u64(&mut buf, o.step_count);
        }
        None => buf.push(0),
    }
    for (_, p) in params.iter() {
        put_f32s(&mut buf, p.value.data());
    }
    if let Some(o) = optimizer {
        for m in o.first_moment.iter().chain(&o.second_moment) {
            put_f32s(&mut buf, m);
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Format(format!(
                "truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| TensorError::Format(e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(TensorError::Format(format!(
            "unsupported format_version {version}"
        )));
    }
    let metadata = c.string()?;
    let count = c.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name = c.string()?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = c.u64()? as usize;
        let numel = c.u64()? as usize;
        manifest.push((name, shape, offset, numel));
    }
    let opt_header = if c.u8()? == 1 {
        let kind = match c.u8()? {
            0 => OptimizerKind::Adam,
            1 => OptimizerKind::AdamW,
            k => return Err(TensorError::Format(format!("unknown optimizer kind {k}"))),
        };
        let vals = (0..5).map(|_| c.f32()).collect::<Result<Vec<_>>>()?;
        Some((kind, vals, c.u64()?))
    } else {
        None
    };
    let payload_start = c.pos;
    let mut params = ParamStore::new();
    let mut total = 0;
    for (name, shape, offset, numel) in &manifest {
        let mut pc = Cursor {
            bytes,
            pos: payload_start + offset,
        };
        let data = pc.f32s(*numel)?;
        params.add(name.clone(), Tensor::new(shape.clone(), data)?);
        total += numel;
    }
    let optimizer = match opt_header {
        Some((kind, vals, step_count)) => {
            let mut mc = Cursor {
                bytes,
                pos: payload_start + 4 * total,
            };
            let first_moment = manifest
                .iter()
                .map(|m| mc.f32s(m.3))
                .collect::<Result<Vec<_>>>()?;
            let second_moment = manifest
                .iter()
                .map(|m| mc.f32s(m.3))
                .collect::<Result<Vec<_>>>()?;
            Some(Optimizer {
                kind,
                lr: vals[0],
                beta1: vals[1],
                beta2: vals[2],
                eps: vals[3],
                weight_decay: vals[4],
                step_count,
                first_moment,
                second_moment,
            })
        }
        None => None,
    };
    Ok(Checkpoint {
        metadata,
        params,
        optimizer,
    })
}

/// Writes atomically (temp file + rename).
pub fn save(
    path: &Path,
    metadata: &str,
    params: &ParamStore<f32>,
    optimizer: Option<&Optimizer>,
) -> Result<()> {
    let bytes = encode(metadata, params, optimizer);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
