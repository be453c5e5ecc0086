//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `HGSR`, u32 version, model config, u64 step,
//! u32 parameter count, then per parameter its key, weight dims, bias length
//! and six f32 arrays: weights, bias, Adam m/v for weights, Adam m/v for bias.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::arch::{ModelConfig, Variant};
use crate::graph::{ParamSlot, ParameterStore};
use crate::tensor::{Dims, Tensor4};

pub const MAGIC: &[u8; 4] = b"HGSR";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint {field} is {found} but the model expects {expected}")]
    ConfigMismatch {
        field: &'static str,
        found: String,
        expected: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub step: u64,
    pub params: ParameterStore<f32>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>, CheckpointError> {
        let bytes = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(what))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let m = &self.model;
        w.u32(m.base_channels as u32);
        w.u32(m.num_hgb as u32);
        w.u32(m.image_channels as u32);
        w.u32(m.controller);
        w.u8(m.variant.code());
        w.u32(m.scales.len() as u32);
        for &s in &m.scales {
            w.u32(s);
        }
        match m.enhancement_anchors {
            Some((a, b)) => {
                w.u8(1);
                w.u32(a as u32);
                w.u32(b as u32);
            }
            None => w.u8(0),
        }
        w.u64(self.step);
        w.u32(self.params.len() as u32);
        for (key, slot) in self.params.iter() {
            w.u32(key.len() as u32);
            w.0.extend_from_slice(key.as_bytes());
            let d = slot.weights.dims();
            for v in [d.n, d.c, d.h, d.w, slot.bias.len()] {
                w.u32(v as u32);
            }
            w.f32s(slot.weights.data());
            w.f32s(&slot.bias);
            w.f32s(slot.m_weights.data());
            w.f32s(slot.v_weights.data());
            w.f32s(&slot.m_bias);
            w.f32s(&slot.v_bias);
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let base_channels = r.u32("config")? as usize;
        let num_hgb = r.u32("config")? as usize;
        let image_channels = r.u32("config")? as usize;
        let controller = r.u32("config")?;
        let code = r.u8("config")?;
        let variant = Variant::from_code(code).ok_or_else(|| CheckpointError::Corrupt(format!("unknown variant code {code}")))?;
        let n_scales = r.u32("config")? as usize;
        let scales = (0..n_scales).map(|_| r.u32("config")).collect::<Result<Vec<_>, _>>()?;
        let enhancement_anchors = match r.u8("config")? {
            0 => None,
            1 => Some((r.u32("config")? as usize, r.u32("config")? as usize)),
            f => return Err(CheckpointError::Corrupt(format!("bad anchor flag {f}"))),
        };
        let model = ModelConfig {
            base_channels,
            num_hgb,
            scales,
            controller,
            variant,
            image_channels,
            enhancement_anchors,
        };
        model.validate().map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let step = r.u64("step")?;
        let count = r.u32("parameter count")?;
        let mut params = ParameterStore::new();
        for _ in 0..count {
            let len = r.u32("parameter key")? as usize;
            let key = std::str::from_utf8(r.take(len, "parameter key")?)
                .map_err(|_| CheckpointError::Corrupt("parameter key is not UTF-8".into()))?
                .to_string();
            let mut d = [0usize; 5];
            for v in &mut d {
                *v = r.u32("parameter shape")? as usize;
            }
            let dims = Dims::new(d[0], d[1], d[2], d[3]);
            let nb = d[4];
            let tensor = |r: &mut Reader| -> Result<Tensor4<f32>, CheckpointError> {
                Ok(Tensor4::from_vec(dims, r.f32s(dims.len(), "parameter data")?).expect("length read from dims"))
            };
            let weights = tensor(&mut r)?;
            let bias = r.f32s(nb, "parameter data")?;
            let mut slot = ParamSlot::new(weights, bias);
            slot.m_weights = tensor(&mut r)?;
            slot.v_weights = tensor(&mut r)?;
            slot.m_bias = r.f32s(nb, "parameter data")?;
            slot.v_bias = r.f32s(nb, "parameter data")?;
            params.insert(key, slot);
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { model, step, params })
    }

    /// Rejects a checkpoint whose architecture differs from `expected`.
    pub fn ensure_compatible(&self, expected: &ModelConfig) -> Result<(), CheckpointError> {
        let m = &self.model;
        let check = |field: &'static str, found: String, want: String| {
            if found == want {
                Ok(())
            } else {
                Err(CheckpointError::ConfigMismatch {
                    field,
                    found,
                    expected: want,
                })
            }
        };
        check("base channels", m.base_channels.to_string(), expected.base_channels.to_string())?;
        check("block count", m.num_hgb.to_string(), expected.num_hgb.to_string())?;
        check("image channels", m.image_channels.to_string(), expected.image_channels.to_string())?;
        check("variant", m.variant.to_string(), expected.variant.to_string())?;
        check("branches", format!("{:?}", m.branch_scales()), format!("{:?}", expected.branch_scales()))?;
        check("anchors", format!("{:?}", m.resolved_anchors()), format!("{:?}", expected.resolved_anchors()))?;
        Ok(())
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, checkpoint.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
