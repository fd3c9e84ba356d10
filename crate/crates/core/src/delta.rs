//! Sparse task deltas against a base checkpoint.
//!
//! A delta stores the selected backbone scalars as `(u32 index, f32 value)`
//! pairs grouped per tensor and selection round, plus every adapter and head
//! tensor in full. Everything else is taken from the base, which is pinned by
//! its content hash.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::backbone::{BackboneConfig, Model};
use crate::checkpoint::{f32s_to_le, fnv1a64, frame, le_to_f32s, store_body, unframe, Checkpoint};
use crate::error::{Error, Result};
use crate::selection::{SelectionMask, TensorSelection};
use crate::store::{Group, ParameterStore};
use crate::tensor::Tensor;

pub const DELTA_FORMAT_VERSION: u32 = 1;

/// Selected values of one backbone tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSection {
    pub name: String,
    pub selection: TensorSelection,
    pub values: Vec<f32>,
}

/// A whole tensor carried by the delta.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSection {
    pub name: String,
    pub group: Group,
    pub layer: Option<usize>,
    pub tensor: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseDelta {
    pub base_hash: u64,
    pub backbone: BackboneConfig,
    pub adapter: Option<AdapterConfig>,
    pub sparse: Vec<SparseSection>,
    pub dense: Vec<DenseSection>,
}

#[derive(Serialize, Deserialize)]
struct RoundRun {
    round: u32,
    count: usize,
}

/// On disk a tensor's entries are ordered by (round, index): all indices,
/// then all values.
#[derive(Serialize, Deserialize)]
struct SparseRecord {
    name: String,
    rounds: Vec<RoundRun>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct DenseRecord {
    name: String,
    shape: Vec<usize>,
    group: Group,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layer: Option<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    base_hash: String,
    backbone: BackboneConfig,
    adapter: Option<AdapterConfig>,
    sparse: Vec<SparseRecord>,
    dense: Vec<DenseRecord>,
    body_bytes: usize,
}

/// Bytes per selected scalar in the body.
pub const SPARSE_ENTRY_BYTES: usize = 4 + 4;

impl SparseDelta {
    /// Number of selected backbone scalars carried.
    pub fn mask_len(&self) -> usize {
        self.sparse.iter().map(|s| s.values.len()).sum()
    }

    /// Number of scalars in the dense sections.
    pub fn dense_len(&self) -> usize {
        self.dense.iter().map(|d| d.tensor.len()).sum()
    }

    pub fn mask(&self) -> Result<SelectionMask> {
        let mut mask = SelectionMask::new();
        for s in &self.sparse {
            let rounds: std::collections::BTreeSet<u32> = s.selection.rounds.iter().copied().collect();
            for r in rounds {
                let adds: Vec<(String, usize)> = s
                    .selection
                    .indices
                    .iter()
                    .zip(&s.selection.rounds)
                    .filter(|(_, &rr)| rr == r)
                    .map(|(&i, _)| (s.name.clone(), i as usize))
                    .collect();
                mask.extend(&adds, r)?;
            }
        }
        Ok(mask)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut body = Vec::new();
        let mut sparse = Vec::new();
        for s in &self.sparse {
            let sel = &s.selection;
            if sel.indices.len() != s.values.len() || sel.rounds.len() != s.values.len() {
                return Err(Error::Corrupt(format!("`{}` selection and values differ in length", s.name)));
            }
            let mut order: Vec<usize> = (0..s.values.len()).collect();
            order.sort_by_key(|&k| (sel.rounds[k], sel.indices[k]));
            let mut rounds: Vec<RoundRun> = Vec::new();
            for &k in &order {
                match rounds.last_mut() {
                    Some(run) if run.round == sel.rounds[k] => run.count += 1,
                    _ => rounds.push(RoundRun { round: sel.rounds[k], count: 1 }),
                }
            }
            sparse.push(SparseRecord { name: s.name.clone(), rounds, offset: body.len() });
            for &k in &order {
                body.extend_from_slice(&sel.indices[k].to_le_bytes());
            }
            for &k in &order {
                body.extend_from_slice(&s.values[k].to_le_bytes());
            }
        }
        let mut dense = Vec::new();
        for d in &self.dense {
            dense.push(DenseRecord {
                name: d.name.clone(),
                shape: d.tensor.shape().to_vec(),
                group: d.group,
                layer: d.layer,
                offset: body.len(),
            });
            f32s_to_le(d.tensor.data(), &mut body);
        }
        let header = Header {
            format_version: DELTA_FORMAT_VERSION,
            base_hash: format!("{:016x}", self.base_hash),
            backbone: self.backbone,
            adapter: self.adapter,
            sparse,
            dense,
            body_bytes: body.len(),
        };
        Ok(frame(DELTA_FORMAT_VERSION, &serde_json::to_vec(&header)?, &body))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (hbytes, body) = unframe(bytes, DELTA_FORMAT_VERSION)?;
        let header: Header = serde_json::from_slice(hbytes)?;
        if header.body_bytes != body.len() {
            return Err(Error::Corrupt(format!(
                "delta body has {} bytes, header declares {}",
                body.len(),
                header.body_bytes
            )));
        }
        let base_hash = u64::from_str_radix(&header.base_hash, 16)
            .map_err(|_| Error::Corrupt(format!("bad base hash `{}`", header.base_hash)))?;
        let slice = |name: &str, start: usize, len: usize| {
            body.get(start..start + len)
                .ok_or_else(|| Error::Corrupt(format!("truncated body: section `{name}` needs bytes {start}..{}", start + len)))
        };
        let mut sparse = Vec::new();
        for r in &header.sparse {
            let n: usize = r.rounds.iter().map(|run| run.count).sum();
            let idx = slice(&r.name, r.offset, 4 * n)?;
            let vals = le_to_f32s(slice(&r.name, r.offset + 4 * n, 4 * n)?);
            let rounds = r.rounds.iter().flat_map(|run| std::iter::repeat_n(run.round, run.count));
            let mut entries: Vec<(u32, u32, f32)> = idx
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .zip(rounds)
                .zip(vals)
                .map(|((i, round), v)| (i, round, v))
                .collect();
            entries.sort_by_key(|e| e.0);
            if entries.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Corrupt(format!("`{}` lists an index twice", r.name)));
            }
            sparse.push(SparseSection {
                name: r.name.clone(),
                selection: TensorSelection {
                    indices: entries.iter().map(|e| e.0).collect(),
                    rounds: entries.iter().map(|e| e.1).collect(),
                },
                values: entries.iter().map(|e| e.2).collect(),
            });
        }
        let mut dense = Vec::new();
        for r in &header.dense {
            let n: usize = r.shape.iter().product();
            let data = le_to_f32s(slice(&r.name, r.offset, 4 * n)?);
            dense.push(DenseSection {
                name: r.name.clone(),
                group: r.group,
                layer: r.layer,
                tensor: Tensor::new(r.shape.clone(), data)?,
            });
        }
        Ok(Self { base_hash, backbone: header.backbone, adapter: header.adapter, sparse, dense })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Builds the delta taking `base` to the adapted model.
///
/// Fails if any backbone scalar outside `mask` differs from the base, since
/// the delta could not reproduce it.
pub fn export_delta(
    model: &Model,
    adapted: &ParameterStore,
    mask: &SelectionMask,
    base: &Checkpoint,
) -> Result<SparseDelta> {
    mask.validate_against(adapted)?;
    let mut sparse = Vec::new();
    let mut dense = Vec::new();
    for (name, param) in adapted.iter() {
        if param.group.is_backbone() {
            let base_t = base.store.tensor(name)?;
            if base_t.shape() != param.tensor.shape() {
                return Err(Error::ShapeMismatch {
                    op: "export_delta",
                    detail: format!("`{name}` {:?} vs base {:?}", param.tensor.shape(), base_t.shape()),
                });
            }
            let sel = mask.get(name);
            let data = param.tensor.data();
            let mut k = 0;
            for (i, (a, b)) in data.iter().zip(base_t.data()).enumerate() {
                let selected = sel.is_some_and(|s| s.indices.get(k) == Some(&(i as u32)));
                if selected {
                    k += 1;
                } else if a.to_bits() != b.to_bits() {
                    return Err(Error::MaskMismatch(format!("`{name}`[{i}] changed but is not selected")));
                }
            }
            if let Some(s) = sel {
                let values = s.indices.iter().map(|&i| data[i as usize]).collect();
                sparse.push(SparseSection { name: name.to_string(), selection: s.clone(), values });
            }
        } else {
            dense.push(DenseSection {
                name: name.to_string(),
                group: param.group,
                layer: param.layer,
                tensor: param.tensor.clone(),
            });
        }
    }
    for (name, _) in base.store.iter() {
        if !adapted.contains(name) {
            return Err(Error::MaskMismatch(format!("base tensor `{name}` missing from adapted model")));
        }
    }
    Ok(SparseDelta {
        base_hash: fnv1a64(&store_body(&base.store)),
        backbone: model.config,
        adapter: model.adapter,
        sparse,
        dense,
    })
}

/// Reconstructs the adapted model from `base` and `delta`.
pub fn apply_delta(base: &Checkpoint, delta: &SparseDelta) -> Result<Checkpoint> {
    let found = base.content_hash();
    if found != delta.base_hash {
        return Err(Error::BaseHashMismatch { expected: delta.base_hash, found });
    }
    let mut store = base.store.clone();
    for s in &delta.sparse {
        let param = store.get_mut(&s.name)?;
        if !param.group.is_selectable() {
            return Err(Error::MaskMismatch(format!("`{}` is not an att/mlp tensor", s.name)));
        }
        let data = param.tensor.data_mut();
        if s.selection.indices.len() != s.values.len() {
            return Err(Error::Corrupt(format!("`{}` has {} indices but {} values", s.name, s.selection.indices.len(), s.values.len())));
        }
        for (&i, &v) in s.selection.indices.iter().zip(&s.values) {
            let slot = data
                .get_mut(i as usize)
                .ok_or_else(|| Error::MaskMismatch(format!("index {i} out of range for `{}`", s.name)))?;
            *slot = v;
        }
    }
    for d in &delta.dense {
        if let Ok(param) = store.get_mut(&d.name) {
            param.tensor = d.tensor.clone();
            param.group = d.group;
            param.layer = d.layer;
        } else {
            store.insert(d.name.clone(), d.tensor.clone(), d.group, d.layer)?;
        }
    }
    Ok(Checkpoint::new(Model { config: delta.backbone, adapter: delta.adapter }, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::attach;
    use crate::backbone::{build, HeadKind};

    fn base() -> Checkpoint {
        let cfg = BackboneConfig {
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            head: HeadKind::Segmentation { classes: 3 },
            ..BackboneConfig::default()
        };
        let (model, store) = build(cfg, 1).unwrap();
        Checkpoint::new(model, store)
    }

    fn adapted(base: &Checkpoint, mask: &SelectionMask) -> Checkpoint {
        let mut ck = base.clone();
        attach(&mut ck.model, &mut ck.store, AdapterConfig::sequential(2), 3).unwrap();
        for (name, sel) in mask.iter() {
            let data = ck.store.get_mut(name).unwrap().tensor.data_mut();
            for &i in &sel.indices {
                data[i as usize] += 0.25;
            }
        }
        ck.store.get_mut("head.bias").unwrap().tensor.data_mut()[0] = 7.0;
        ck
    }

    #[test]
    fn empty_mask_carries_only_dense_sections() {
        let b = base();
        let a = adapted(&b, &SelectionMask::new());
        let delta = export_delta(&a.model, &a.store, &SelectionMask::new(), &b).unwrap();
        assert!(delta.sparse.is_empty());
        assert!(delta.dense.iter().all(|d| matches!(d.group, Group::Adapter | Group::Head)));
        assert_eq!(delta.dense_len(), a.store.count(Group::Adapter) + a.store.count(Group::Head));
    }

    #[test]
    fn roundtrip_reproduces_adapted_model() {
        let b = base();
        let mut mask = SelectionMask::new();
        mask.extend(&[("blocks.1.mlp.w1".into(), 5), ("blocks.0.att.wq".into(), 0)], 1).unwrap();
        mask.extend(&[("blocks.1.mlp.w1".into(), 2)], 2).unwrap();
        let a = adapted(&b, &mask);
        let delta = export_delta(&a.model, &a.store, &mask, &b).unwrap();
        assert_eq!(delta.mask_len(), 3);
        let back = SparseDelta::from_bytes(&delta.to_bytes().unwrap()).unwrap();
        assert_eq!(back, delta);
        assert_eq!(back.mask().unwrap().len(), 3);
        let rebuilt = apply_delta(&b, &back).unwrap();
        assert!(rebuilt.store.bit_eq(&a.store));
        assert_eq!(rebuilt.model, a.model);
    }

    #[test]
    fn unselected_change_is_rejected() {
        let b = base();
        let mut a = adapted(&b, &SelectionMask::new());
        a.store.get_mut("blocks.0.att.wq").unwrap().tensor.data_mut()[3] = 1.0;
        assert!(export_delta(&a.model, &a.store, &SelectionMask::new(), &b).is_err());
    }

    #[test]
    fn wrong_base_is_rejected() {
        let b = base();
        let a = adapted(&b, &SelectionMask::new());
        let delta = export_delta(&a.model, &a.store, &SelectionMask::new(), &b).unwrap();
        let mut other = b.clone();
        other.store.get_mut("pos_embed").unwrap().tensor.data_mut()[0] += 1.0;
        assert!(matches!(apply_delta(&other, &delta), Err(Error::BaseHashMismatch { .. })));
    }
}
