//! The `SGDM` checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! "SGDM"  version:u32
//! schedule: steps:u32 beta_start:f64 beta_end:f64
//! config:   9 × u32 (image_size channels extra_channels cond_channels
//!           base_width width temb_dim hint_width groups)
//! summary:  stage:str steps:u64 final_loss:f64 seed:u64
//! tensors:  count:u32, then per tensor name:str rank:u32 dims:rank×u32 values:numel×f32
//! ```
//! Strings are a `u32` byte length followed by UTF-8.

use std::path::Path;

use anchorgen_core::scheduler::NoiseSchedule;
use anchorgen_core::sgdm::{ParamStore, SgdmConfig, SgdmParams};
use anchorgen_core::numerics::Tensor;
use serde::Serialize;

pub const MAGIC: &[u8; 4] = b"SGDM";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic at offset 0")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated at offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("checkpoint inconsistent at offset {offset}: {msg}")]
    Corrupt { offset: usize, msg: String },
    #[error("checkpoint tensors do not match the network layout: {0}")]
    Layout(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

/// What produced the parameters.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainingSummary {
    pub stage: String,
    pub steps: u64,
    pub final_loss: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: SgdmParams,
    pub schedule: NoiseSchedule,
    pub summary: TrainingSummary,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn config_fields(c: &SgdmConfig) -> [usize; 9] {
    [c.image_size, c.channels, c.extra_channels, c.cond_channels, c.base_width, c.width, c.temb_dim, c.hint_width, c.groups]
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, ck.schedule.steps() as u32);
    out.extend_from_slice(&ck.schedule.beta_start().to_le_bytes());
    out.extend_from_slice(&ck.schedule.beta_end().to_le_bytes());
    for v in config_fields(&ck.params.config) {
        put_u32(&mut out, v as u32);
    }
    put_str(&mut out, &ck.summary.stage);
    out.extend_from_slice(&ck.summary.steps.to_le_bytes());
    out.extend_from_slice(&ck.summary.final_loss.to_le_bytes());
    out.extend_from_slice(&ck.summary.seed.to_le_bytes());
    put_u32(&mut out, ck.params.store.len() as u32);
    for (name, t) in ck.params.store.iter() {
        put_str(&mut out, name);
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return Err(CheckpointError::Truncated { offset: self.buf.len(), needed: n - left });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn corrupt(&self, at: usize, msg: impl Into<String>) -> CheckpointError {
        CheckpointError::Corrupt { offset: at, msg: msg.into() }
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let at = self.pos;
        let n = self.u32()? as usize;
        if n > 4096 {
            return Err(self.corrupt(at, format!("string length {n} is implausible")));
        }
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.corrupt(at + 4, "string is not UTF-8"))
    }
}

/// Parses a whole checkpoint; nothing is returned unless every byte checks out.
pub fn decode(buf: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    r.pos = 4;
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let at = r.pos;
    let steps = r.u32()? as usize;
    let (b0, b1) = (r.f64()?, r.f64()?);
    let schedule = NoiseSchedule::linear(steps, b0, b1).map_err(|e| r.corrupt(at, e.to_string()))?;
    let at = r.pos;
    let mut f = [0usize; 9];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    let config = SgdmConfig {
        image_size: f[0],
        channels: f[1],
        extra_channels: f[2],
        cond_channels: f[3],
        base_width: f[4],
        width: f[5],
        temb_dim: f[6],
        hint_width: f[7],
        groups: f[8],
    };
    config.validate().map_err(|e| r.corrupt(at, e.to_string()))?;
    let summary = TrainingSummary {
        stage: r.str()?,
        steps: r.u64()?,
        final_loss: r.f64()?,
        seed: r.u64()?,
    };
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = r.pos;
        let name = r.str()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(r.corrupt(at, format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| r.corrupt(at, "tensor size overflows"))?)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| r.corrupt(at, e.to_string()))?;
        store.insert(&name, t).map_err(|e| r.corrupt(at, e.to_string()))?;
    }
    if r.pos != buf.len() {
        return Err(r.corrupt(r.pos, format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let params = SgdmParams::from_store(config, store).map_err(|e| CheckpointError::Layout(e.to_string()))?;
    Ok(Checkpoint { params, schedule, summary })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io = |e: std::io::Error| CheckpointError::Io { path: path.display().to_string(), msg: e.to_string() };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, encode(ck)).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let buf = std::fs::read(path).map_err(|e| CheckpointError::Io { path: path.display().to_string(), msg: e.to_string() })?;
    decode(&buf)
}
