//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "SKCK" | u16 version | u16 reserved
//! u32 len | config JSON
//! u64 step
//! u32 len | metadata (UTF-8, free form)
//! u32 tensor count
//! per tensor: u16 len | name | u8 dtype (0 f32, 1 f64) | u8 rank | u32 dims...
//!             | u8 has_moments | values | [first moment | second moment]
//! u32 CRC32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};

use super::{Model, ModelConfig, ModelError, ParamStore};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SKCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Everything needed to rebuild a model and continue its training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub meta: String,
    pub params: ParamStore,
    /// Optimizer moments keyed by parameter name.
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64, meta: String, moments: BTreeMap<String, (Tensor, Tensor)>) -> Self {
        Checkpoint { config: model.config().clone(), step, meta, params: model.params().clone(), moments }
    }

    /// Builds a model from the stored parameters, in their stored precision.
    pub fn model(&self) -> Result<Model, ModelError> {
        let dtype = self.params.iter().next().map(|(_, v)| v.dtype()).unwrap_or(DType::F32);
        Model::from_params(self.config.clone(), dtype, self.params.clone())
    }
}

fn dtype_code(d: DType) -> Result<u8, ModelError> {
    match d {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(ModelError::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn put_tensor_values(out: &mut Vec<u8>, t: &Tensor) -> Result<(), ModelError> {
    match t.dtype() {
        DType::F32 => t.flatten_all()?.to_vec1::<f32>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F64 => t.flatten_all()?.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        other => return Err(ModelError::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
    Ok(())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>, ModelError> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    let cfg = serde_json::to_vec(&ck.config).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&ck.step.to_le_bytes());
    out.extend_from_slice(&(ck.meta.len() as u32).to_le_bytes());
    out.extend_from_slice(ck.meta.as_bytes());
    out.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for (name, var) in ck.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype_code(var.dtype())?);
        out.push(var.rank() as u8);
        for &d in var.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_tensor_values(&mut out, var.as_tensor())?;
        match ck.moments.get(name) {
            Some((m, v)) => {
                if m.dims() != var.dims() || v.dims() != var.dims() || m.dtype() != var.dtype() || v.dtype() != var.dtype() {
                    return Err(ModelError::Checkpoint(format!("moments of {name} do not match the parameter")));
                }
                out.push(1);
                put_tensor_values(&mut out, m)?;
                put_tensor_values(&mut out, v)?;
            }
            None => out.push(0),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Checkpoint("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, dtype: DType, dims: &[usize]) -> Result<Tensor, ModelError> {
        let n: usize = dims.iter().product();
        let t = match dtype {
            DType::F32 => {
                let raw = self.take(n * 4)?;
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            _ => {
                let raw = self.take(n * 8)?;
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
        };
        Ok(t)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    if bytes.len() < 12 {
        return Err(ModelError::Checkpoint("truncated".into()));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ModelError::Checkpoint(format!(
            "checksum mismatch (stored {stored:08x}, computed {computed:08x})"
        )));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let n = r.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
    let step = r.u64()?;
    let n = r.u32()? as usize;
    let meta = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::default();
    let mut moments = BTreeMap::new();
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let dtype = match r.u8()? {
            0 => DType::F32,
            1 => DType::F64,
            c => return Err(ModelError::Checkpoint(format!("unknown dtype code {c}"))),
        };
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let value = r.tensor(dtype, &dims)?;
        if r.u8()? == 1 {
            let m = r.tensor(dtype, &dims)?;
            let v = r.tensor(dtype, &dims)?;
            moments.insert(name.clone(), (m, v));
        }
        params.insert(name, Var::from_tensor(&value)?);
    }
    if r.pos != body.len() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { config, step, meta, params, moments })
}

/// Writes atomically via a temporary sibling file.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), ModelError> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint; with `expected` set, a differing stored config is
/// rejected.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint, ModelError> {
    let ck = decode_checkpoint(&fs::read(path)?)?;
    if let Some(cfg) = expected {
        if *cfg != ck.config {
            return Err(ModelError::ConfigMismatch);
        }
    }
    Ok(ck)
}
