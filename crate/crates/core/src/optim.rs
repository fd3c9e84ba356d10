//! AdamW restricted to an explicit set of trainable scalars.
//!
//! Moment buffers are allocated only for what is trainable: whole tensors
//! (adapters, head, full fine-tuning) or individual indices of backbone
//! tensors picked by the selector. Everything else is never written.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Param, ParameterStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Fraction of the run spent in linear warmup.
    pub warmup_frac: f32,
    pub decay: LrDecay,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_frac: 0.05,
            decay: LrDecay::Cosine,
        }
    }
}

impl AdamWConfig {
    /// Learning rate at 1-based `step` of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f32 {
        let warmup = ((self.warmup_frac as f64 * total as f64).round() as usize).max(1);
        if step <= warmup {
            return self.lr * step as f32 / warmup as f32;
        }
        match self.decay {
            LrDecay::Constant => self.lr,
            LrDecay::Cosine => {
                let span = (total.saturating_sub(warmup)).max(1) as f64;
                let progress = ((step - warmup) as f64 / span).min(1.0);
                (self.lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
            }
        }
    }
}

/// Decoupled weight decay applies to matrices, never to norms, biases or
/// the positional table.
pub fn decays(name: &str, param: &Param) -> bool {
    param.tensor.shape().len() == 2 && name != "pos_embed"
}

#[derive(Debug, Clone)]
struct Slot {
    /// `None` means every scalar of the tensor.
    indices: Option<Vec<u32>>,
    m: Vec<f32>,
    v: Vec<f32>,
    /// Per-entry update count, for bias correction of late joiners.
    t: Vec<u32>,
    decay: bool,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    slots: IndexMap<String, Slot>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, slots: IndexMap::new() }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Makes a whole tensor trainable.
    pub fn enable_dense(&mut self, store: &ParameterStore, name: &str) -> Result<()> {
        let param = store.get(name)?;
        let n = param.tensor.len();
        let decay = decays(name, param);
        self.slots.insert(
            name.to_string(),
            Slot { indices: None, m: vec![0.0; n], v: vec![0.0; n], t: vec![0; n], decay },
        );
        Ok(())
    }

    /// Makes individual scalars of a tensor trainable.
    pub fn enable_indices(&mut self, store: &ParameterStore, name: &str, indices: &[usize]) -> Result<()> {
        let param = store.get(name)?;
        let len = param.tensor.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::MaskMismatch(format!("index {bad} out of range for `{name}` ({len})")));
        }
        let decay = decays(name, param);
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            indices: Some(Vec::new()),
            m: Vec::new(),
            v: Vec::new(),
            t: Vec::new(),
            decay,
        });
        let Some(existing) = slot.indices.as_mut() else {
            return Ok(()); // already fully trainable
        };
        existing.extend(indices.iter().map(|&i| i as u32));
        slot.m.resize(existing.len(), 0.0);
        slot.v.resize(existing.len(), 0.0);
        slot.t.resize(existing.len(), 0);
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    /// Number of scalars with optimizer state.
    pub fn state_len(&self) -> usize {
        self.slots.values().map(|s| s.m.len()).sum()
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    /// Applies one update to every trainable scalar. Trainable tensors with
    /// no gradient entry are treated as having zero gradient.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &IndexMap<String, Tensor<f32>>,
        lr: f32,
    ) -> Result<()> {
        let c = self.config;
        for (name, slot) in self.slots.iter_mut() {
            let param = store.get_mut(name)?;
            let values = param.tensor.data_mut();
            let grad = grads.get(name).map(|g| g.data());
            if let Some(g) = grad {
                if g.len() != values.len() {
                    return Err(Error::ShapeMismatch {
                        op: "adamw",
                        detail: format!("`{name}` grad {} vs param {}", g.len(), values.len()),
                    });
                }
            }
            let wd = if slot.decay { c.weight_decay } else { 0.0 };
            let Slot { indices, m, v, t, .. } = slot;
            for k in 0..m.len() {
                let p = indices.as_ref().map_or(k, |idx| idx[k] as usize);
                let g = grad.map_or(0.0, |g| g[p]);
                t[k] += 1;
                let n = t[k] as i32;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let mhat = m[k] / (1.0 - c.beta1.powi(n));
                let vhat = v[k] / (1.0 - c.beta2.powi(n));
                values[p] -= lr * (mhat / (vhat.sqrt() + c.eps) + wd * values[p]);
            }
        }
        Ok(())
    }
}

/// Plain SGD over the same trainable set, used to check masked updates.
pub fn sgd_step(
    store: &mut ParameterStore,
    trainable: &IndexMap<String, Option<Vec<usize>>>,
    grads: &IndexMap<String, Tensor<f32>>,
    lr: f32,
) -> Result<()> {
    for (name, which) in trainable {
        let Some(g) = grads.get(name) else { continue };
        let values = store.get_mut(name)?.tensor.data_mut();
        match which {
            None => values.iter_mut().zip(g.data()).for_each(|(p, &gv)| *p -= lr * gv),
            Some(idx) => idx.iter().for_each(|&i| values[i] -= lr * g.data()[i]),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Group;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), Group::BackboneAtt, Some(0))
            .unwrap();
        s.insert("b", Tensor::from_vec(vec![0.5, 0.5]), Group::Head, None).unwrap();
        s
    }

    #[test]
    fn warmup_then_cosine() {
        let c = AdamWConfig::default();
        assert!((c.lr_at(1, 100) - c.lr / 5.0).abs() < 1e-9);
        assert_eq!(c.lr_at(5, 100), c.lr);
        assert!(c.lr_at(100, 100).abs() < 1e-9);
        let k = AdamWConfig { decay: LrDecay::Constant, ..c };
        assert_eq!(k.lr_at(80, 100), c.lr);
    }

    #[test]
    fn only_enabled_indices_move() {
        let mut s = store();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.enable_indices(&s, "w", &[2]).unwrap();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap());
        grads.insert("b".to_string(), Tensor::from_vec(vec![1.0; 2]));
        opt.step(&mut s, &grads, 0.1).unwrap();
        let w = s.tensor("w").unwrap().data();
        assert_eq!([w[0], w[1], w[3]], [1.0, 2.0, 4.0]);
        assert!(w[2] < 3.0);
        assert_eq!(s.tensor("b").unwrap().data(), &[0.5, 0.5]);
        assert_eq!(opt.state_len(), 1);
    }

    #[test]
    fn sgd_masked_update_definition() {
        let mut s = store();
        let mut trainable = IndexMap::new();
        trainable.insert("w".to_string(), Some(vec![1]));
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![2, 2], vec![0.5, -2.0, 7.0, 1.0]).unwrap());
        sgd_step(&mut s, &trainable, &grads, 0.1).unwrap();
        assert_eq!(s.tensor("w").unwrap().data(), &[1.0, 2.0 - 0.1 * -2.0, 3.0, 4.0]);
    }

    #[test]
    fn decay_excludes_vectors_and_positions() {
        let s = store();
        assert!(decays("w", s.get("w").unwrap()));
        assert!(!decays("b", s.get("b").unwrap()));
    }
}
