//! Checkpoint files.
//!
//! Layout: `u32` format version, `u64` header length, JSON header, body. All
//! integers and floats are little-endian. The header lists every tensor in
//! store order with its shape, group and byte offset into the body; offsets
//! are contiguous. The body is the concatenated `f32` data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::backbone::{BackboneConfig, Model};
use crate::error::{Error, Result};
use crate::store::{Group, ParameterStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub group: Group,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    backbone: BackboneConfig,
    adapter: Option<AdapterConfig>,
    body_bytes: usize,
    body_hash: String,
    tensors: Vec<TensorRecord>,
}

/// A model's structure plus every parameter value.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub store: ParameterStore,
}

pub(crate) fn frame(version: u32, header: &[u8], body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + header.len() + body.len());
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(body);
    out
}

/// Splits a framed file into `(version, header, body)`.
pub(crate) fn unframe(bytes: &[u8], expected: u32) -> Result<(&[u8], &[u8])> {
    if bytes.len() < 12 {
        return Err(Error::Corrupt("file shorter than its fixed prelude".into()));
    }
    let version = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if version != expected {
        return Err(Error::FormatVersion { found: version, expected });
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let rest = &bytes[12..];
    if hlen > rest.len() {
        return Err(Error::Corrupt(format!("header claims {hlen} bytes, file has {}", rest.len())));
    }
    Ok(rest.split_at(hlen))
}

pub(crate) fn f32s_to_le(values: &[f32], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn le_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

/// Concatenated little-endian body of a store.
pub fn store_body(store: &ParameterStore) -> Vec<u8> {
    let mut body = Vec::with_capacity(store.total_count() * 4);
    for (_, p) in store.iter() {
        f32s_to_le(p.tensor.data(), &mut body);
    }
    body
}

impl Checkpoint {
    pub fn new(model: Model, store: ParameterStore) -> Self {
        Self { model, store }
    }

    /// FNV-1a of the body bytes; identifies a base for sparse deltas.
    pub fn content_hash(&self) -> u64 {
        fnv1a64(&store_body(&self.store))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let body = store_body(&self.store);
        let mut offset = 0;
        let tensors = self
            .store
            .iter()
            .map(|(name, p)| {
                let rec = TensorRecord {
                    name: name.to_string(),
                    shape: p.tensor.shape().to_vec(),
                    dtype: "f32le".into(),
                    offset,
                    group: p.group,
                    layer: p.layer,
                };
                offset += p.tensor.len() * 4;
                rec
            })
            .collect();
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            backbone: self.model.config,
            adapter: self.model.adapter,
            body_bytes: body.len(),
            body_hash: format!("{:016x}", fnv1a64(&body)),
            tensors,
        };
        Ok(frame(CHECKPOINT_FORMAT_VERSION, &serde_json::to_vec(&header)?, &body))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (hbytes, body) = unframe(bytes, CHECKPOINT_FORMAT_VERSION)?;
        let header: Header = serde_json::from_slice(hbytes)?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::FormatVersion { found: header.format_version, expected: CHECKPOINT_FORMAT_VERSION });
        }
        header.backbone.validate()?;
        let mut store = ParameterStore::new();
        let mut expected_offset = 0;
        for rec in &header.tensors {
            if rec.dtype != "f32le" {
                return Err(Error::Corrupt(format!("`{}` has unsupported dtype {}", rec.name, rec.dtype)));
            }
            if rec.offset != expected_offset {
                return Err(Error::Corrupt(format!(
                    "`{}` at offset {} but previous tensor ends at {expected_offset}",
                    rec.name, rec.offset
                )));
            }
            let n: usize = rec.shape.iter().product();
            let end = rec.offset + n * 4;
            if end > body.len() {
                return Err(Error::Corrupt(format!(
                    "truncated body: tensor `{}` needs bytes {}..{end}, body has {}",
                    rec.name,
                    rec.offset,
                    body.len()
                )));
            }
            let tensor = Tensor::new(rec.shape.clone(), le_to_f32s(&body[rec.offset..end]))?;
            store.insert(rec.name.clone(), tensor, rec.group, rec.layer)?;
            expected_offset = end;
        }
        if expected_offset != body.len() || header.body_bytes != body.len() {
            return Err(Error::Corrupt(format!(
                "body has {} bytes, header accounts for {expected_offset} (declares {})",
                body.len(),
                header.body_bytes
            )));
        }
        let hash = format!("{:016x}", fnv1a64(body));
        if hash != header.body_hash {
            return Err(Error::Corrupt(format!("body hash {hash} does not match header {}", header.body_hash)));
        }
        let model = Model { config: header.backbone, adapter: header.adapter };
        Ok(Self { model, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn save_checkpoint(model: &Model, store: &ParameterStore, path: &Path) -> Result<()> {
    Checkpoint::new(model.clone(), store.clone()).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{attach, AdapterConfig};
    use crate::backbone::{build, HeadKind};

    fn small() -> Checkpoint {
        let cfg = BackboneConfig {
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            head: HeadKind::Segmentation { classes: 3 },
            ..BackboneConfig::default()
        };
        let (mut model, mut store) = build(cfg, 5).unwrap();
        attach(&mut model, &mut store, AdapterConfig::sequential(2), 5).unwrap();
        Checkpoint::new(model, store)
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn roundtrip_is_bit_exact_and_idempotent() {
        let ck = small();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(back.store.bit_eq(&ck.store));
        assert_eq!(back.model, ck.model);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.store.get("blocks.0.adapter_att.up.weight").unwrap().group, Group::Adapter);
    }

    #[test]
    fn truncated_body_names_tensor() {
        let bytes = small().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 10]).unwrap_err().to_string();
        assert!(err.contains("truncated") && err.contains("adapter_mlp.up.bias"), "{err}");
    }

    #[test]
    fn version_and_hash_checked() {
        let mut bytes = small().to_bytes().unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::FormatVersion { found: 9, .. })));
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Corrupt(_))));
    }
}
