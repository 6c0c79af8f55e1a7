//! Binary weight file.
//!
//! Layout, all integers little-endian: magic `NNWT`, u32 version, 8-byte
//! config fingerprint, u32 tensor count, then per tensor a u32 name length,
//! UTF-8 name, u32 rank, u32 dims and f64 values.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Model, ModelError, WeightSet};
use crate::autodiff::Tensor;

pub const WEIGHT_MAGIC: &[u8; 4] = b"NNWT";
pub const WEIGHT_FORMAT_VERSION: u32 = 1;

pub fn weights_to_bytes(ws: &WeightSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&ws.fingerprint);
    out.extend_from_slice(&(ws.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ws.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<WeightSet, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != WEIGHT_MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != WEIGHT_FORMAT_VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let mut fingerprint = [0u8; 8];
    fingerprint.copy_from_slice(r.take(8)?);
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| ModelError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| ModelError::Format("tensor size overflows".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| ModelError::Format("tensor size overflows".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| ModelError::Format(e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(ModelError::Format(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Format("trailing bytes".into()));
    }
    Ok(WeightSet { tensors, fingerprint })
}

pub fn save_weights(path: &Path, ws: &WeightSet) -> Result<(), ModelError> {
    std::fs::write(path, weights_to_bytes(ws))?;
    Ok(())
}

/// Loads and validates weights for `model`. With `head_reset`, the stored
/// fingerprint is not required to match and the head is re-initialized;
/// all other tensors must still match by name and shape.
pub fn load_weights(path: &Path, model: &Model, head_reset: Option<u64>) -> Result<WeightSet, ModelError> {
    let mut ws = weights_from_bytes(&std::fs::read(path)?)?;
    if let Some(seed) = head_reset {
        ws.fingerprint = model.fingerprint();
        model.reset_head(&mut ws, seed);
    }
    model.check_weights(&ws)?;
    Ok(ws)
}
