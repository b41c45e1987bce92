//! Binary checkpoint format.
//!
//! ```text
//! "PLAB" | version u32 | n_layers n_heads d_model d_head vocab_size max_seq_len (u32 each)
//!        | rms_eps (f64 bits as u64) | n_sections u32
//! section: name_len u32 | name (utf-8) | ndim u32 | dims (u32 each) | data (f64 each)
//! ```
//! All integers and floats little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{LayerWeights, ModelConfig, TransformerModel};
use crate::error::{LabError, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PLAB";
pub const CHECKPOINT_VERSION: u32 = 1;

impl TransformerModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(16 + self.n_params() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            c.n_layers,
            c.n_heads,
            c.d_model,
            c.d_head,
            c.vocab_size,
            c.max_seq_len,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.rms_eps.to_bits().to_le_bytes());
        let params = self.named_params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(LabError::BadCheckpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(LabError::BadCheckpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let config = ModelConfig {
            n_layers: r.u32()? as usize,
            n_heads: r.u32()? as usize,
            d_model: r.u32()? as usize,
            d_head: r.u32()? as usize,
            vocab_size: r.u32()? as usize,
            max_seq_len: r.u32()? as usize,
            rms_eps: f64::from_bits(r.u64()?),
        };
        config.validate()?;
        let n_sections = r.u32()? as usize;
        let mut sections = std::collections::HashMap::with_capacity(n_sections);
        for _ in 0..n_sections {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| LabError::BadCheckpoint(format!("section name: {e}")))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            sections.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(LabError::BadCheckpoint("trailing bytes".into()));
        }
        let mut take = |name: &str| {
            sections
                .remove(name)
                .ok_or_else(|| LabError::BadCheckpoint(format!("missing section {name}")))
        };
        let embed = take("embed")?;
        let layers = (0..config.n_layers)
            .map(|i| {
                Ok(LayerWeights {
                    attn_norm: take(&format!("layers.{i}.attn_norm"))?,
                    w_q: take(&format!("layers.{i}.w_q"))?,
                    w_k: take(&format!("layers.{i}.w_k"))?,
                    w_v: take(&format!("layers.{i}.w_v"))?,
                    w_o: take(&format!("layers.{i}.w_o"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = take("final_norm")?;
        let unembed = take("unembed")?;
        TransformerModel::from_parts(config, embed, layers, final_norm, unembed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the checkpoint encoding, hex.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
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
            .ok_or_else(|| LabError::BadCheckpoint("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
