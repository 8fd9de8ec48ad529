use super::{PromptError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const BANK_MAGIC: &[u8; 8] = b"TABEMB1\0";
const NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Pseudo,
    Exported,
    Unknown,
}

/// Frozen per-class text anchors. Row `k` of both matrices belongs to
/// `classes[k]`, which fixes the label index used everywhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    classes: Vec<String>,
    dim: usize,
    normal: Vec<f32>,
    abnormal: Vec<f32>,
    provenance: Provenance,
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

impl EmbeddingBank {
    pub fn new(classes: Vec<String>, dim: usize, normal: Vec<f32>, abnormal: Vec<f32>, provenance: Provenance) -> Result<Self> {
        let k = classes.len();
        if k == 0 || dim == 0 {
            return Err(PromptError::Config("bank needs at least one class and a positive dim".into()));
        }
        if normal.len() != k * dim || abnormal.len() != k * dim {
            return Err(PromptError::Config(format!("bank rows do not match {k}x{dim}")));
        }
        for (side, m) in [("normal", &normal), ("abnormal", &abnormal)] {
            for (i, row) in m.chunks_exact(dim).enumerate() {
                let n = row_norm(row);
                if !n.is_finite() || (n - 1.0).abs() > NORM_TOL {
                    return Err(PromptError::Config(format!("{side} row {i} ({}) has norm {n}", classes[i])));
                }
            }
        }
        Ok(Self {
            classes,
            dim,
            normal,
            abnormal,
            provenance,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn normal_row(&self, k: usize) -> &[f32] {
        &self.normal[k * self.dim..(k + 1) * self.dim]
    }

    pub fn abnormal_row(&self, k: usize) -> &[f32] {
        &self.abnormal[k * self.dim..(k + 1) * self.dim]
    }

    pub fn normal_matrix(&self) -> Tensor<f32> {
        Tensor::new(vec![self.k(), self.dim], self.normal.clone()).expect("bank shape")
    }

    pub fn abnormal_matrix(&self) -> Tensor<f32> {
        Tensor::new(vec![self.k(), self.dim], self.abnormal.clone()).expect("bank shape")
    }

    /// Cosine between the normal and abnormal anchor of class `k`.
    pub fn anchor_cosine(&self, k: usize) -> f64 {
        self.normal_row(k).iter().zip(self.abnormal_row(k)).map(|(&a, &b)| a as f64 * b as f64).sum()
    }

    /// Same anchors re-tagged, for banks whose origin is known out of band.
    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.normal.len());
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for c in &self.classes {
            out.extend_from_slice(&(c.len() as u16).to_le_bytes());
            out.extend_from_slice(c.as_bytes());
        }
        for v in self.normal.iter().chain(&self.abnormal) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses and validates a bank image; provenance is not part of the
    /// binary format and comes back as [`Provenance::Unknown`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != BANK_MAGIC {
            return Err(PromptError::Format {
                offset: 0,
                detail: "bad magic".into(),
            });
        }
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if k == 0 || dim == 0 {
            return Err(PromptError::Format {
                offset: 8,
                detail: format!("K={k}, C={dim} must be positive"),
            });
        }
        let mut classes = Vec::with_capacity(k.min(1 << 16));
        for _ in 0..k {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| PromptError::Format {
                offset: at,
                detail: "class name is not UTF-8".into(),
            })?;
            classes.push(name.to_string());
        }
        let float_bytes = k.checked_mul(dim).and_then(|n| n.checked_mul(8)).ok_or(PromptError::Format {
            offset: 8,
            detail: "dimensions overflow".into(),
        })?;
        let expected = r.pos + float_bytes;
        if bytes.len() != expected {
            return Err(PromptError::Format {
                offset: bytes.len().min(expected),
                detail: format!("expected {expected} bytes, found {}", bytes.len()),
            });
        }
        let base = r.pos;
        let floats: Vec<f32> = bytes[base..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        for (row, chunk) in floats.chunks_exact(dim).enumerate() {
            let offset = base + row * dim * 4;
            if let Some(j) = chunk.iter().position(|v| !v.is_finite()) {
                return Err(PromptError::Format {
                    offset: offset + 4 * j,
                    detail: "non-finite value".into(),
                });
            }
            let n = row_norm(chunk);
            if (n - 1.0).abs() > NORM_TOL {
                return Err(PromptError::Format {
                    offset,
                    detail: format!("row norm {n} is not 1"),
                });
            }
        }
        let (normal, abnormal) = floats.split_at(k * dim);
        EmbeddingBank::new(classes, dim, normal.to_vec(), abnormal.to_vec(), Provenance::Unknown)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(PromptError::Format {
            offset: self.pos,
            detail: format!("truncated: need {n} more bytes"),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

/// JSON written next to a bank recording where its anchors came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankSidecar {
    pub schema: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<serde_json::Value>,
}

pub fn sidecar_path(bank: &Path) -> PathBuf {
    let mut s = bank.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PromptError + '_ {
    move |source| PromptError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the binary bank and its provenance sidecar.
pub fn save_bank(bank: &EmbeddingBank, path: &Path, encoder: Option<serde_json::Value>) -> Result<()> {
    std::fs::write(path, bank.to_bytes()).map_err(io_err(path))?;
    let side = BankSidecar {
        schema: crate::SCHEMA.into(),
        provenance: bank.provenance,
        encoder,
    };
    let sp = sidecar_path(path);
    std::fs::write(&sp, serde_json::to_string_pretty(&side).expect("sidecar serializes")).map_err(io_err(&sp))
}

/// Reads a bank; provenance comes from the sidecar when one exists.
pub fn load_bank(path: &Path) -> Result<EmbeddingBank> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let bank = EmbeddingBank::from_bytes(&bytes)?;
    let sp = sidecar_path(path);
    if !sp.exists() {
        return Ok(bank);
    }
    let text = std::fs::read_to_string(&sp).map_err(io_err(&sp))?;
    let side: BankSidecar = serde_json::from_str(&text).map_err(|e| PromptError::Config(format!("{}: {e}", sp.display())))?;
    Ok(bank.with_provenance(side.provenance))
}
