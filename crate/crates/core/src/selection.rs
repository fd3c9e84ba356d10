//! Internal adapter: progressive selection of backbone scalars to unfreeze.
//!
//! Between rounds the absolute gradient of every not-yet-selected attention
//! and MLP scalar is summed. At each scheduled round the highest-scoring
//! scalars (ties broken by pool order) join the mask and the sums restart
//! from zero. Selected scalars stay selected for the rest of the run.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Group, ParameterStore};
use crate::tensor::Tensor;

/// One tensor's slice of the selection pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolSegment {
    pub name: String,
    pub group: Group,
    pub layer: usize,
    pub offset: usize,
    pub len: usize,
}

/// All selectable scalars, in `(layer, tensor, index)` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pool {
    segments: Vec<PoolSegment>,
    total: usize,
}

pub fn build_pool(store: &ParameterStore) -> Result<Pool> {
    let mut segments = Vec::new();
    let mut offset = 0;
    for (name, param) in store.iter() {
        if !param.group.is_selectable() || param.tensor.is_empty() {
            continue;
        }
        let layer = param.layer.ok_or_else(|| {
            Error::InvalidConfig(format!("selectable parameter `{name}` has no layer index"))
        })?;
        let len = param.tensor.len();
        segments.push(PoolSegment { name: name.to_string(), group: param.group, layer, offset, len });
        offset += len;
    }
    if offset == 0 {
        return Err(Error::EmptyPool);
    }
    Ok(Pool { segments, total: offset })
}

impl Pool {
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn segments(&self) -> &[PoolSegment] {
        &self.segments
    }

    pub fn num_layers(&self) -> usize {
        self.segments.iter().map(|s| s.layer + 1).max().unwrap_or(0)
    }

    /// `(tensor name, flat index)` of a pool position.
    pub fn address(&self, pos: usize) -> (&str, usize) {
        let seg = self.segment_of(pos);
        (&seg.name, pos - seg.offset)
    }

    pub fn segment_of(&self, pos: usize) -> &PoolSegment {
        let i = self.segments.partition_point(|s| s.offset + s.len <= pos);
        &self.segments[i]
    }

    pub fn layer_of(&self, pos: usize) -> usize {
        self.segment_of(pos).layer
    }

    pub fn position(&self, name: &str, index: usize) -> Option<usize> {
        self.segments.iter().find(|s| s.name == name && index < s.len).map(|s| s.offset + index)
    }

    /// Pool size of one layer's att or mlp group.
    pub fn layer_group_size(&self, layer: usize, group: Group) -> usize {
        self.segments.iter().filter(|s| s.layer == layer && s.group == group).map(|s| s.len).sum()
    }

    /// Membership flags of `mask` over pool positions.
    pub fn flags(&self, mask: &SelectionMask) -> Result<Vec<bool>> {
        let mut flags = vec![false; self.total];
        for (name, sel) in mask.iter() {
            let seg = self
                .segments
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| Error::MaskMismatch(format!("`{name}` is not in the selection pool")))?;
            for &i in &sel.indices {
                let i = i as usize;
                if i >= seg.len {
                    return Err(Error::MaskMismatch(format!("index {i} out of range for `{name}` ({})", seg.len)));
                }
                flags[seg.offset + i] = true;
            }
        }
        Ok(flags)
    }
}

/// Selected indices of one tensor, sorted, with the round that added each.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSelection {
    pub indices: Vec<u32>,
    pub rounds: Vec<u32>,
}

/// Cumulative set of trainable backbone scalars.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMask {
    tensors: IndexMap<String, TensorSelection>,
}

impl SelectionMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.values().map(|t| t.indices.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorSelection)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&TensorSelection> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str, index: usize) -> bool {
        self.tensors.get(name).is_some_and(|t| t.indices.binary_search(&(index as u32)).is_ok())
    }

    /// Adds `(name, index)` pairs tagged with `round`. Duplicates are rejected.
    pub fn extend(&mut self, additions: &[(String, usize)], round: u32) -> Result<()> {
        let mut by_tensor: IndexMap<&str, Vec<u32>> = IndexMap::new();
        for (name, idx) in additions {
            by_tensor.entry(name.as_str()).or_default().push(*idx as u32);
        }
        for (name, mut new) in by_tensor {
            new.sort_unstable();
            let entry = self.tensors.entry(name.to_string()).or_default();
            let mut merged = Vec::with_capacity(entry.indices.len() + new.len());
            let mut rounds = Vec::with_capacity(merged.capacity());
            let (mut i, mut j) = (0, 0);
            while i < entry.indices.len() || j < new.len() {
                let take_old = j >= new.len() || (i < entry.indices.len() && entry.indices[i] < new[j]);
                if take_old {
                    merged.push(entry.indices[i]);
                    rounds.push(entry.rounds[i]);
                    i += 1;
                } else {
                    if merged.last() == Some(&new[j]) || entry.indices.get(i) == Some(&new[j]) {
                        return Err(Error::MaskMismatch(format!("`{name}`[{}] selected twice", new[j])));
                    }
                    merged.push(new[j]);
                    rounds.push(round);
                    j += 1;
                }
            }
            entry.indices = merged;
            entry.rounds = rounds;
        }
        Ok(())
    }

    /// Checks every tensor and index against a store's shapes.
    pub fn validate_against(&self, store: &ParameterStore) -> Result<()> {
        for (name, sel) in self.iter() {
            let param = store.get(name).map_err(|_| Error::MaskMismatch(format!("unknown tensor `{name}`")))?;
            if !param.group.is_selectable() {
                return Err(Error::MaskMismatch(format!("`{name}` is not an att/mlp tensor")));
            }
            if sel.indices.len() != sel.rounds.len() || sel.indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::MaskMismatch(format!("`{name}` indices not strictly sorted")));
            }
            if let Some(&last) = sel.indices.last() {
                if last as usize >= param.tensor.len() {
                    return Err(Error::MaskMismatch(format!(
                        "`{name}` index {last} out of range for {} scalars",
                        param.tensor.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Selection rounds over a run of `total_steps` steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionSchedule {
    pub total_steps: usize,
    pub step_size: usize,
    pub round_steps: Vec<usize>,
}

impl SelectionSchedule {
    /// Rounds at `s, 2s, ..., n s` with `n = floor((T - 1) / s)`, so every
    /// selected scalar trains for at least one step.
    pub fn periodic(total_steps: usize, step_size: usize) -> Result<Self> {
        if total_steps == 0 || step_size == 0 {
            return Err(Error::InvalidConfig("schedule needs T >= 1 and s >= 1".into()));
        }
        let n = (total_steps - 1) / step_size;
        Ok(Self { total_steps, step_size, round_steps: (1..=n).map(|r| r * step_size).collect() })
    }

    /// One round after the first step, holding the whole internal budget.
    pub fn up_front(total_steps: usize) -> Result<Self> {
        if total_steps < 2 {
            return Err(Error::InvalidConfig("up-front selection needs T >= 2".into()));
        }
        Ok(Self { total_steps, step_size: total_steps, round_steps: vec![1] })
    }

    /// `max(50, T / 5)`.
    pub fn default_step_size(total_steps: usize) -> usize {
        (total_steps / 5).max(50)
    }

    pub fn rounds(&self) -> usize {
        self.round_steps.len()
    }

    pub fn round_at(&self, step: usize) -> Option<usize> {
        self.round_steps.iter().position(|&s| s == step)
    }
}

/// `floor(total / n)` per round; the last round also takes the remainder.
pub fn round_quota(total: usize, rounds: usize, round_index: usize) -> usize {
    if rounds == 0 || round_index >= rounds {
        return 0;
    }
    let base = total / rounds;
    if round_index + 1 == rounds {
        total - base * (rounds - 1)
    } else {
        base
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionCriterion {
    #[default]
    AccumulatedGradient,
    RandomUniform,
    WeightMagnitude,
    LayerWiseAccumulatedGradient,
}

impl std::str::FromStr for SelectionCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" | "accumulated_gradient" => Ok(Self::AccumulatedGradient),
            "random" | "random_uniform" => Ok(Self::RandomUniform),
            "magnitude" | "weight_magnitude" => Ok(Self::WeightMagnitude),
            "layer-wise" | "layer_wise" | "layer_wise_accumulated_gradient" => {
                Ok(Self::LayerWiseAccumulatedGradient)
            }
            other => Err(Error::InvalidConfig(format!("unknown criterion `{other}`"))),
        }
    }
}

/// Windowed sum of `|grad|` per pool position.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreAccumulator {
    scores: Vec<f64>,
}

impl ScoreAccumulator {
    pub fn new(pool: &Pool) -> Self {
        Self { scores: vec![0.0; pool.len()] }
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Adds `|g|` for every unselected pool scalar. Tensors missing from
    /// `grads` contribute nothing.
    pub fn accumulate(
        &mut self,
        pool: &Pool,
        selected: &[bool],
        grads: &IndexMap<String, Tensor<f32>>,
        step: usize,
    ) -> Result<()> {
        for seg in pool.segments() {
            let Some(g) = grads.get(&seg.name) else { continue };
            if g.len() != seg.len {
                return Err(Error::ShapeMismatch {
                    op: "accumulate",
                    detail: format!("`{}` grad has {} values, pool has {}", seg.name, g.len(), seg.len),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient { step, tensor: seg.name.clone() });
            }
            let scores = &mut self.scores[seg.offset..seg.offset + seg.len];
            let flags = &selected[seg.offset..seg.offset + seg.len];
            for ((s, &v), &taken) in scores.iter_mut().zip(g.data()).zip(flags) {
                if !taken {
                    *s += v.abs() as f64;
                }
            }
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.scores.fill(0.0);
    }
}

/// The `quota` highest-scoring unexcluded positions (ties: earlier position
/// first), returned in rank order.
pub fn rank_select(scores: &[f64], quota: usize, excluded: &[bool]) -> Vec<usize> {
    rank_select_among(scores, quota, excluded, 0..scores.len())
}

fn rank_select_among(
    scores: &[f64],
    quota: usize,
    excluded: &[bool],
    range: std::ops::Range<usize>,
) -> Vec<usize> {
    if quota == 0 {
        return Vec::new();
    }
    let mut candidates: Vec<usize> = range.filter(|&p| !excluded[p]).collect();
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if quota < candidates.len() {
        candidates.select_nth_unstable_by(quota - 1, order);
        candidates.truncate(quota);
    }
    candidates.sort_unstable_by(order);
    candidates
}

/// Drives selection over one adaptation run.
#[derive(Debug, Clone)]
pub struct Selector {
    pool: Pool,
    acc: ScoreAccumulator,
    mask: SelectionMask,
    selected: Vec<bool>,
    schedule: SelectionSchedule,
    criterion: SelectionCriterion,
    total_quota: usize,
    random_scores: Option<Vec<f64>>,
}

impl Selector {
    pub fn new(
        store: &ParameterStore,
        schedule: SelectionSchedule,
        criterion: SelectionCriterion,
        total_quota: usize,
        seed: u64,
    ) -> Result<Self> {
        let pool = build_pool(store)?;
        let random_scores = (criterion == SelectionCriterion::RandomUniform).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e1e_c7ed);
            (0..pool.len()).map(|_| rng.gen::<f64>()).collect()
        });
        Ok(Self {
            acc: ScoreAccumulator::new(&pool),
            selected: vec![false; pool.len()],
            mask: SelectionMask::new(),
            pool,
            schedule,
            criterion,
            total_quota,
            random_scores,
        })
    }

    pub fn pool(&self) -> &Pool {
        &self.pool
    }

    pub fn mask(&self) -> &SelectionMask {
        &self.mask
    }

    pub fn accumulator(&self) -> &ScoreAccumulator {
        &self.acc
    }

    pub fn schedule(&self) -> &SelectionSchedule {
        &self.schedule
    }

    pub fn selected_flags(&self) -> &[bool] {
        &self.selected
    }

    /// Whether any later round still needs gradient scores.
    pub fn wants_scores(&self, step: usize) -> bool {
        matches!(
            self.criterion,
            SelectionCriterion::AccumulatedGradient | SelectionCriterion::LayerWiseAccumulatedGradient
        ) && self.schedule.round_steps.iter().any(|&s| s >= step)
    }

    pub fn accumulate(&mut self, grads: &IndexMap<String, Tensor<f32>>, step: usize) -> Result<()> {
        self.acc.accumulate(&self.pool, &self.selected, grads, step)
    }

    /// Runs the round scheduled at `step`; returns the newly selected
    /// `(tensor, index)` addresses.
    pub fn run_round(&mut self, step: usize, store: &ParameterStore) -> Result<Vec<(String, usize)>> {
        let round = self.schedule.round_at(step).ok_or(Error::OffSchedule { step })?;
        let quota = round_quota(self.total_quota, self.schedule.rounds(), round);
        let magnitude;
        let scores: &[f64] = match self.criterion {
            SelectionCriterion::AccumulatedGradient | SelectionCriterion::LayerWiseAccumulatedGradient => {
                self.acc.scores()
            }
            SelectionCriterion::RandomUniform => self.random_scores.as_deref().expect("drawn at construction"),
            SelectionCriterion::WeightMagnitude => {
                magnitude = self.magnitudes(store)?;
                &magnitude
            }
        };
        let picked = if self.criterion == SelectionCriterion::LayerWiseAccumulatedGradient {
            let layers = self.pool.num_layers();
            let per_layer = quota / layers.max(1);
            let mut all = Vec::new();
            for layer in 0..layers {
                let start = self.pool.segments.iter().find(|s| s.layer == layer).map_or(0, |s| s.offset);
                let end = self
                    .pool
                    .segments
                    .iter()
                    .filter(|s| s.layer == layer)
                    .map(|s| s.offset + s.len)
                    .max()
                    .unwrap_or(start);
                all.extend(rank_select_among(scores, per_layer, &self.selected, start..end));
            }
            all
        } else {
            rank_select(scores, quota, &self.selected)
        };
        let additions: Vec<(String, usize)> = picked
            .iter()
            .map(|&p| {
                let (name, idx) = self.pool.address(p);
                (name.to_string(), idx)
            })
            .collect();
        for &p in &picked {
            self.selected[p] = true;
        }
        self.mask.extend(&additions, round as u32 + 1)?;
        self.acc.reset();
        Ok(additions)
    }

    fn magnitudes(&self, store: &ParameterStore) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.pool.len()];
        for seg in self.pool.segments() {
            let t = store.tensor(&seg.name)?;
            for (o, &v) in out[seg.offset..seg.offset + seg.len].iter_mut().zip(t.data()) {
                *o = v.abs() as f64;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build, BackboneConfig, HeadKind};

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            image_size: (8, 8),
            in_channels: 3,
            patch_size: 4,
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            mlp_ratio: 4,
            head: HeadKind::Segmentation { classes: 3 },
        }
    }

    #[test]
    fn pool_size_for_one_block() {
        let (_, store) = build(tiny(), 0).unwrap();
        let pool = build_pool(&store).unwrap();
        // Oracle: enumerate att and mlp tensors and sum sizes.
        let expected: usize =
            store.iter().filter(|(_, p)| p.group.is_selectable()).map(|(_, p)| p.tensor.len()).sum();
        assert_eq!(pool.len(), expected);
        assert_eq!(pool.len(), 840);
        assert!(pool.segments().iter().all(|s| s.group != Group::Adapter));
    }

    #[test]
    fn pool_order_is_stable() {
        let (_, a) = build(tiny(), 1).unwrap();
        let (_, b) = build(tiny(), 2).unwrap();
        assert_eq!(build_pool(&a).unwrap(), build_pool(&b).unwrap());
    }

    #[test]
    fn empty_pool_rejected() {
        let (_, mut store) = build(tiny(), 0).unwrap();
        store.remove_group(Group::BackboneAtt);
        store.remove_group(Group::BackboneMlp);
        assert!(matches!(build_pool(&store), Err(Error::EmptyPool)));
    }

    #[test]
    fn rank_select_exclusion_and_ties() {
        let scores = [0.9, 0.5, 0.5, 0.1];
        assert_eq!(rank_select(&scores, 2, &[true, false, false, false]), vec![1, 2]);
        assert!(rank_select(&scores, 0, &[false; 4]).is_empty());
        assert_eq!(rank_select(&scores, 10, &[false, true, false, false]), vec![0, 2, 3]);
    }

    #[test]
    fn quotas_fold_remainder_into_last_round() {
        let q: Vec<usize> = (0..4).map(|r| round_quota(10, 4, r)).collect();
        assert_eq!(q, vec![2, 2, 2, 4]);
    }

    #[test]
    fn periodic_schedule() {
        let s = SelectionSchedule::periodic(2000, 400).unwrap();
        assert_eq!(s.round_steps, vec![400, 800, 1200, 1600]);
        let s = SelectionSchedule::periodic(2001, 400).unwrap();
        assert_eq!(s.rounds(), 5);
        assert!(SelectionSchedule::periodic(10, 20).unwrap().round_steps.is_empty());
        assert_eq!(SelectionSchedule::default_step_size(100), 50);
        assert_eq!(SelectionSchedule::default_step_size(2000), 400);
    }

    #[test]
    fn accumulate_sums_abs_and_skips_selected() {
        let (_, store) = build(tiny(), 0).unwrap();
        let pool = build_pool(&store).unwrap();
        let mut acc = ScoreAccumulator::new(&pool);
        let mut flags = vec![false; pool.len()];
        flags[1] = true;
        let name = pool.segments()[0].name.clone();
        let len = pool.segments()[0].len;
        let mut grads = IndexMap::new();
        let g1: Vec<f32> = (0..len).map(|i| i as f32 - 3.0).collect();
        grads.insert(name.clone(), Tensor::from_vec(g1.clone()));
        acc.accumulate(&pool, &flags, &grads, 1).unwrap();
        acc.accumulate(&pool, &flags, &grads, 2).unwrap();
        assert_eq!(acc.scores()[0], 6.0);
        assert_eq!(acc.scores()[1], 0.0);
        assert_eq!(acc.scores()[2], 2.0);
        acc.reset();
        assert!(acc.scores().iter().all(|&s| s == 0.0));

        grads.insert(name, Tensor::from_vec(vec![f32::NAN; len]));
        assert!(matches!(
            acc.accumulate(&pool, &flags, &grads, 7),
            Err(Error::NonFiniteGradient { step: 7, .. })
        ));
    }

    #[test]
    fn off_schedule_round_rejected() {
        let (_, store) = build(tiny(), 0).unwrap();
        let sched = SelectionSchedule::periodic(100, 50).unwrap();
        let mut sel = Selector::new(&store, sched, SelectionCriterion::AccumulatedGradient, 10, 0).unwrap();
        assert!(matches!(sel.run_round(49, &store), Err(Error::OffSchedule { step: 49 })));
        assert_eq!(sel.run_round(50, &store).unwrap().len(), 10);
        assert!(sel.accumulator().scores().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn layer_wise_splits_quota_evenly() {
        let mut cfg = tiny();
        cfg.num_blocks = 3;
        let (_, store) = build(cfg, 0).unwrap();
        let sched = SelectionSchedule::periodic(100, 50).unwrap();
        let mut sel =
            Selector::new(&store, sched, SelectionCriterion::LayerWiseAccumulatedGradient, 10, 0).unwrap();
        let added = sel.run_round(50, &store).unwrap();
        // floor(10 / 3) = 3 per layer, surplus dropped.
        assert_eq!(added.len(), 9);
        for layer in 0..3 {
            let prefix = format!("blocks.{layer}.");
            assert_eq!(added.iter().filter(|(n, _)| n.starts_with(&prefix)).count(), 3);
        }
    }

    #[test]
    fn magnitude_criterion_picks_largest_weights() {
        let (_, store) = build(tiny(), 4).unwrap();
        let sched = SelectionSchedule::periodic(100, 50).unwrap();
        let mut sel = Selector::new(&store, sched, SelectionCriterion::WeightMagnitude, 5, 0).unwrap();
        let added = sel.run_round(50, &store).unwrap();
        let mut all: Vec<f32> = build_pool(&store)
            .unwrap()
            .segments()
            .iter()
            .flat_map(|s| store.tensor(&s.name).unwrap().data().iter().map(|v| v.abs()).collect::<Vec<_>>())
            .collect();
        all.sort_by(|a, b| b.total_cmp(a));
        let got: Vec<f32> =
            added.iter().map(|(n, i)| store.tensor(n).unwrap().data()[*i].abs()).collect();
        assert_eq!(got, all[..5].to_vec());
    }

    #[test]
    fn mask_extend_rejects_duplicates_and_keeps_order() {
        let mut m = SelectionMask::new();
        m.extend(&[("a".into(), 5), ("a".into(), 1)], 1).unwrap();
        m.extend(&[("a".into(), 3)], 2).unwrap();
        assert_eq!(m.get("a").unwrap().indices, vec![1, 3, 5]);
        assert_eq!(m.get("a").unwrap().rounds, vec![1, 2, 1]);
        assert!(m.extend(&[("a".into(), 3)], 3).is_err());
        assert!(m.contains("a", 5) && !m.contains("a", 4));
    }

    #[test]
    fn criterion_parsing() {
        assert_eq!("random".parse::<SelectionCriterion>().unwrap(), SelectionCriterion::RandomUniform);
        assert!("bogus".parse::<SelectionCriterion>().is_err());
    }
}
