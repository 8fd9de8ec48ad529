use super::{Backbone, BackboneConfig, BackboneError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 8] = b"TABCKPT1";

/// Training provenance stored in the checkpoint header.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: Option<u64>,
    pub steps: u64,
    pub epochs: u64,
    pub loss_curve: Vec<f64>,
    pub mode: Option<String>,
    pub synth_method: Option<String>,
    pub tau: Option<f64>,
    /// Class order of the bank the backbone was aligned to.
    pub classes: Vec<String>,
    /// "best" or "final".
    pub selection: Option<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub backbone: Backbone<f32>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: BackboneConfig,
    meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn config(&self) -> &BackboneConfig {
        self.backbone.config()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.backbone.config().clone(),
            meta: self.meta.clone(),
        };
        // through Value so object keys come out sorted
        let json = serde_json::to_value(&header).and_then(|v| serde_json::to_vec(&v)).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in self.backbone.named() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(fmt_err(0, "bad magic"));
        }
        let len = r.u32()? as usize;
        let at = r.pos;
        let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| fmt_err(at, &format!("header JSON: {e}")))?;
        header.config.validate()?;
        let mut named = Vec::new();
        while r.pos < bytes.len() {
            let start = r.pos;
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| fmt_err(start, "tensor name is not UTF-8"))?.to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(fmt_err(start, &format!("tensor `{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| fmt_err(start, "shape overflows"))?;
            let data_at = r.pos;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| fmt_err(start, "shape overflows"))?)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if let Some(j) = data.iter().position(|v| !v.is_finite()) {
                return Err(fmt_err(data_at + 4 * j, &format!("non-finite value in `{name}`")));
            }
            let t = Tensor::new(shape, data).map_err(|e| fmt_err(start, &e.to_string()))?;
            named.push((name, t));
        }
        let backbone = Backbone::from_named(header.config, named)?;
        Ok(Self { backbone, meta: header.meta })
    }
}

fn fmt_err(offset: usize, detail: &str) -> BackboneError {
    BackboneError::Format {
        offset,
        detail: detail.to_string(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| fmt_err(self.pos, &format!("truncated: need {n} more bytes")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|source| BackboneError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| BackboneError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
