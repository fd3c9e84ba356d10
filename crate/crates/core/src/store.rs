//! Named, grouped parameter tensors.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    BackboneAtt,
    BackboneMlp,
    BackboneOther,
    Adapter,
    Head,
}

impl Group {
    pub const ALL: [Group; 5] =
        [Group::BackboneAtt, Group::BackboneMlp, Group::BackboneOther, Group::Adapter, Group::Head];

    pub fn is_backbone(self) -> bool {
        matches!(self, Group::BackboneAtt | Group::BackboneMlp | Group::BackboneOther)
    }

    /// Attention and MLP weights form the internal-adapter selection pool.
    pub fn is_selectable(self) -> bool {
        matches!(self, Group::BackboneAtt | Group::BackboneMlp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::BackboneAtt => "backbone-att",
            Group::BackboneMlp => "backbone-mlp",
            Group::BackboneOther => "backbone-other",
            Group::Adapter => "adapter",
            Group::Head => "head",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor<f32>,
    pub group: Group,
    /// Transformer block index, when the parameter lives inside one.
    pub layer: Option<usize>,
}

/// Ordered map of named parameters; iteration follows insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: IndexMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<f32>,
        group: Group,
        layer: Option<usize>,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        self.entries.insert(name, Param { tensor, group, layer });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn remove_group(&mut self, group: Group) {
        self.entries.retain(|_, p| p.group != group);
    }

    /// Exact scalar count of one group.
    pub fn count(&self, group: Group) -> usize {
        self.entries.values().filter(|p| p.group == group).map(|p| p.tensor.len()).sum()
    }

    /// ‖θ(T)‖: every scalar of the backbone groups.
    pub fn backbone_count(&self) -> usize {
        self.entries.values().filter(|p| p.group.is_backbone()).map(|p| p.tensor.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(|p| p.tensor.len()).sum()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            entries: self.entries.iter().map(|(k, p)| (k.clone(), (p.group, p.tensor.clone()))).collect(),
        }
    }

    /// Restores every tensor from `snapshot`; name sets must match exactly.
    pub fn restore(&mut self, snapshot: &Snapshot) -> Result<()> {
        if self.entries.len() != snapshot.entries.len()
            || self.entries.keys().any(|k| !snapshot.entries.contains_key(k))
        {
            return Err(Error::SnapshotMismatch("name sets differ".into()));
        }
        self.restore_where(snapshot, |_| true)
    }

    /// Restores only tensors whose group passes `filter`.
    pub fn restore_groups(&mut self, snapshot: &Snapshot, groups: &[Group]) -> Result<()> {
        self.restore_where(snapshot, |g| groups.contains(&g))
    }

    fn restore_where(&mut self, snapshot: &Snapshot, filter: impl Fn(Group) -> bool) -> Result<()> {
        for (name, param) in self.entries.iter_mut() {
            if !filter(param.group) {
                continue;
            }
            let (_, saved) = snapshot
                .entries
                .get(name)
                .ok_or_else(|| Error::SnapshotMismatch(format!("`{name}` missing from snapshot")))?;
            if saved.shape() != param.tensor.shape() {
                return Err(Error::SnapshotMismatch(format!(
                    "`{name}`: shape {:?} vs {:?}",
                    saved.shape(),
                    param.tensor.shape()
                )));
            }
            param.tensor.data_mut().copy_from_slice(saved.data());
        }
        Ok(())
    }

    /// Bitwise equality of values, groups and order.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb && a.group == b.group && a.layer == b.layer && a.tensor.bit_eq(&b.tensor)
            })
    }
}

/// Deep copy of a store's values.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    entries: IndexMap<String, (Group, Tensor<f32>)>,
}

impl Snapshot {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.get(name).map(|(_, t)| t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::from_vec(vec![1.0, 2.0]), Group::BackboneAtt, Some(0)).unwrap();
        s.insert("m", Tensor::from_vec(vec![3.0, 4.0, 5.0]), Group::BackboneMlp, Some(0)).unwrap();
        s.insert("h", Tensor::from_vec(vec![6.0]), Group::Head, None).unwrap();
        s
    }

    fn perturb(s: &mut ParameterStore) {
        for (_, p) in s.iter_mut() {
            for v in p.tensor.data_mut() {
                *v += 0.25;
            }
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(s.insert("a", Tensor::from_vec(vec![0.0]), Group::Head, None).is_err());
    }

    #[test]
    fn counts_by_group() {
        let s = store();
        assert_eq!(s.count(Group::BackboneAtt), 2);
        assert_eq!(s.backbone_count(), 5);
        assert_eq!(s.total_count(), 6);
    }

    #[test]
    fn snapshot_restore_roundtrip() {
        let mut s = store();
        let snap = s.snapshot();
        let original = s.clone();
        perturb(&mut s);
        assert!(!s.bit_eq(&original));
        s.restore(&snap).unwrap();
        assert!(s.bit_eq(&original));
    }

    #[test]
    fn empty_snapshot_restore_is_noop() {
        let mut s = ParameterStore::new();
        let snap = s.snapshot();
        assert!(snap.is_empty());
        s.restore(&snap).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn restore_subset_leaves_other_groups() {
        let mut s = store();
        let snap = s.snapshot();
        perturb(&mut s);
        // Oracle: full copy of the perturbed store with only the att tensor reverted by hand.
        let mut expected = s.clone();
        expected.get_mut("a").unwrap().tensor = snap.tensor("a").unwrap().clone();
        s.restore_groups(&snap, &[Group::BackboneAtt]).unwrap();
        assert!(s.bit_eq(&expected));
    }

    #[test]
    fn restore_rejects_mismatched_names() {
        let mut s = store();
        let snap = s.snapshot();
        s.insert("extra", Tensor::from_vec(vec![0.0]), Group::Adapter, None).unwrap();
        assert!(matches!(s.restore(&snap), Err(Error::SnapshotMismatch(_))));
    }
}
