//! Toy plain-attention vision transformer for dense prediction.
//!
//! Images `[B, H, W, C]` are cut into `P x P` patches, embedded, passed through
//! `L` pre-norm blocks, normalized, projected per token to the output
//! channels and upsampled back to pixel resolution by nearest neighbour.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterConfig, AdapterStyle, Site};
use crate::error::{Error, Result};
use crate::store::{Group, Param, ParameterStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadKind {
    Segmentation { classes: usize },
    Regression,
}

impl HeadKind {
    pub fn channels(self) -> usize {
        match self {
            HeadKind::Segmentation { classes } => classes,
            HeadKind::Regression => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: (usize, usize),
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub head: HeadKind,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: (32, 32),
            in_channels: 3,
            patch_size: 4,
            embed_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            mlp_ratio: 2,
            head: HeadKind::Segmentation { classes: 5 },
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let p = self.patch_size;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if p == 0 || h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return bad(format!("image {h}x{w} not divisible by patch size {p}"));
        }
        if self.in_channels == 0 || self.embed_dim == 0 {
            return bad("in_channels and embed_dim must be positive".into());
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.num_heads));
        }
        if self.num_blocks == 0 {
            return bad("num_blocks must be >= 1".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be >= 1".into());
        }
        if self.head.channels() == 0 {
            return bad("segmentation head needs at least one class".into());
        }
        Ok(())
    }

    /// Token grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch_size, self.image_size.1 / self.patch_size)
    }

    pub fn num_tokens(&self) -> usize {
        let (a, b) = self.grid();
        a * b
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }
}

/// Names of the tensors of one block, in registration (and pool) order.
pub struct BlockNames {
    pub norm1: [String; 2],
    pub att: [String; 8],
    pub norm2: [String; 2],
    pub mlp: [String; 4],
}

pub fn block_names(layer: usize) -> BlockNames {
    let p = format!("blocks.{layer}");
    let s = |x: &str| format!("{p}.{x}");
    BlockNames {
        norm1: [s("norm1.gamma"), s("norm1.beta")],
        att: [
            s("att.wq"),
            s("att.bq"),
            s("att.wk"),
            s("att.bk"),
            s("att.wv"),
            s("att.bv"),
            s("att.wo"),
            s("att.bo"),
        ],
        norm2: [s("norm2.gamma"), s("norm2.beta")],
        mlp: [s("mlp.w1"), s("mlp.b1"), s("mlp.w2"), s("mlp.b2")],
    }
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

/// Network structure; all values live in the [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: BackboneConfig,
    pub adapter: Option<AdapterConfig>,
}

/// Deterministically initializes a model and its parameters.
pub fn build(config: BackboneConfig, seed: u64) -> Result<(Model, ParameterStore)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let (d, hid, pd) = (config.embed_dim, config.hidden_dim(), config.patch_dim());
    let other = Group::BackboneOther;

    store.insert("patch_embed.weight", uniform_fan_in(&mut rng, &[pd, d], pd), other, None)?;
    store.insert("patch_embed.bias", Tensor::zeros(&[d]), other, None)?;
    let n = config.num_tokens();
    let pos = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-0.02f32..0.02)).collect())?;
    store.insert("pos_embed", pos, other, None)?;

    for layer in 0..config.num_blocks {
        let names = block_names(layer);
        let l = Some(layer);
        store.insert(names.norm1[0].clone(), Tensor::full(&[d], 1.0), other, l)?;
        store.insert(names.norm1[1].clone(), Tensor::zeros(&[d]), other, l)?;
        for pair in names.att.chunks(2) {
            store.insert(pair[0].clone(), uniform_fan_in(&mut rng, &[d, d], d), Group::BackboneAtt, l)?;
            store.insert(pair[1].clone(), Tensor::zeros(&[d]), Group::BackboneAtt, l)?;
        }
        store.insert(names.norm2[0].clone(), Tensor::full(&[d], 1.0), other, l)?;
        store.insert(names.norm2[1].clone(), Tensor::zeros(&[d]), other, l)?;
        let mlp = Group::BackboneMlp;
        store.insert(names.mlp[0].clone(), uniform_fan_in(&mut rng, &[d, hid], d), mlp, l)?;
        store.insert(names.mlp[1].clone(), Tensor::zeros(&[hid]), mlp, l)?;
        store.insert(names.mlp[2].clone(), uniform_fan_in(&mut rng, &[hid, d], hid), mlp, l)?;
        store.insert(names.mlp[3].clone(), Tensor::zeros(&[d]), mlp, l)?;
    }
    store.insert("norm.gamma", Tensor::full(&[d], 1.0), other, None)?;
    store.insert("norm.beta", Tensor::zeros(&[d]), other, None)?;
    let k = config.head.channels();
    store.insert(HEAD_WEIGHT, uniform_fan_in(&mut rng, &[d, k], d), Group::Head, None)?;
    store.insert(HEAD_BIAS, Tensor::zeros(&[k]), Group::Head, None)?;

    Ok((Model { config, adapter: None }, store))
}

/// Rearranges `[B, H, W, C]` images into `[B, N, P*P*C]` patch rows,
/// row-major over the token grid and `(py, px, c)` within a patch.
pub fn patchify(images: &Tensor<f32>, config: &BackboneConfig) -> Result<Tensor<f32>> {
    let (h, w) = config.image_size;
    let (p, c) = (config.patch_size, config.in_channels);
    let s = images.shape();
    if s.len() != 4 || s[1] != h || s[2] != w || s[3] != c {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            detail: format!("images {s:?}, expected [B, {h}, {w}, {c}]"),
        });
    }
    let b = s[0];
    let (gh, gw) = config.grid();
    let src = images.data();
    let mut out = Vec::with_capacity(images.len());
    for bi in 0..b {
        for ty in 0..gh {
            for tx in 0..gw {
                for py in 0..p {
                    let row = ((bi * h + ty * p + py) * w + tx * p) * c;
                    out.extend_from_slice(&src[row..row + p * c]);
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, config.patch_dim()], out)
}

/// Decides which parameters get gradients during a forward pass.
pub trait GradPolicy {
    fn requires_grad(&self, name: &str, param: &Param) -> bool;
}

/// No parameter requires a gradient.
pub struct NoGrad;

impl GradPolicy for NoGrad {
    fn requires_grad(&self, _: &str, _: &Param) -> bool {
        false
    }
}

/// Every parameter requires a gradient.
pub struct AllGrad;

impl GradPolicy for AllGrad {
    fn requires_grad(&self, _: &str, _: &Param) -> bool {
        true
    }
}

impl<F: Fn(&str, &Param) -> bool + ?Sized> GradPolicy for F {
    fn requires_grad(&self, name: &str, param: &Param) -> bool {
        self(name, param)
    }
}

struct Binder<'a, P: GradPolicy + ?Sized> {
    store: &'a ParameterStore,
    policy: &'a P,
}

impl<P: GradPolicy + ?Sized> Binder<'_, P> {
    fn bind(&self, tape: &mut Tape, name: &str) -> Result<NodeId> {
        let param = self.store.get(name)?;
        let rg = self.policy.requires_grad(name, param);
        Ok(tape.param(name, param.tensor.clone(), rg))
    }

    fn bind_all<const N: usize>(&self, tape: &mut Tape, names: &[String; N]) -> Result<[NodeId; N]> {
        let ids = names.iter().map(|n| self.bind(tape, n)).collect::<Result<Vec<_>>>()?;
        Ok(ids.try_into().expect("one id per name"))
    }
}

impl Model {
    /// Records a forward pass; returns the dense prediction node `[B, H, W, K]`.
    pub fn forward<P: GradPolicy + ?Sized>(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        images: &Tensor<f32>,
        policy: &P,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let binder = Binder { store, policy };
        let b = images.shape().first().copied().unwrap_or(0);
        let patches = patchify(images, cfg)?;
        let x = tape.leaf(patches, false);
        let pw = binder.bind(tape, "patch_embed.weight")?;
        let pb = binder.bind(tape, "patch_embed.bias")?;
        let x = tape.linear(x, pw, pb)?;
        let pos = binder.bind(tape, "pos_embed")?;
        let mut x = tape.add_broadcast(x, pos)?;

        for layer in 0..cfg.num_blocks {
            x = self.block(tape, &binder, layer, x)?;
        }

        let ng = binder.bind(tape, "norm.gamma")?;
        let nb = binder.bind(tape, "norm.beta")?;
        let x = tape.layer_norm(x, ng, nb, LAYER_NORM_EPS)?;
        let hw = binder.bind(tape, HEAD_WEIGHT)?;
        let hb = binder.bind(tape, HEAD_BIAS)?;
        let logits = tape.linear(x, hw, hb)?;
        let (gh, gw) = cfg.grid();
        let grid = tape.reshape(logits, vec![b, gh, gw, cfg.head.channels()])?;
        tape.upsample_nearest(grid, cfg.patch_size)
    }

    fn block<P: GradPolicy + ?Sized>(
        &self,
        tape: &mut Tape,
        binder: &Binder<'_, P>,
        layer: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let names = block_names(layer);
        let [g1, b1] = binder.bind_all(tape, &names.norm1)?;
        let att = binder.bind_all(tape, &names.att)?;
        let [g2, b2] = binder.bind_all(tape, &names.norm2)?;
        let mlp = binder.bind_all(tape, &names.mlp)?;

        let h = tape.layer_norm(x, g1, b1, LAYER_NORM_EPS)?;
        let q = tape.linear(h, att[0], att[1])?;
        let k = tape.linear(h, att[2], att[3])?;
        let v = tape.linear(h, att[4], att[5])?;
        let a = tape.scaled_dot_attention(q, k, v, self.config.num_heads)?;
        let a = tape.linear(a, att[6], att[7])?;
        let mut u = tape.add(x, a)?;

        let adapter = self.adapter;
        let sequential = matches!(adapter.map(|c| c.style), Some(AdapterStyle::SequentialResidual));
        if sequential && adapter.is_some_and(|c| c.sites.after_att) {
            let w = binder.bind_all(tape, &adapter::site_names(layer, Site::Att))?;
            u = adapter::residual(tape, u, &w)?;
        }

        let h2 = tape.layer_norm(u, g2, b2, LAYER_NORM_EPS)?;
        let m = tape.linear(h2, mlp[0], mlp[1])?;
        let m = tape.gelu(m);
        let mut m = tape.linear(m, mlp[2], mlp[3])?;
        if let Some(AdapterConfig { style: AdapterStyle::ParallelScaled { scale }, .. }) = adapter {
            let w = binder.bind_all(tape, &adapter::site_names(layer, Site::Mlp))?;
            let side = adapter::branch(tape, h2, &w)?;
            let side = tape.scale(side, scale);
            m = tape.add(m, side)?;
        }
        let mut y = tape.add(u, m)?;
        if sequential && adapter.is_some_and(|c| c.sites.after_mlp) {
            let w = binder.bind_all(tape, &adapter::site_names(layer, Site::Mlp))?;
            y = adapter::residual(tape, y, &w)?;
        }
        Ok(y)
    }

    /// Forward pass without recording gradients; returns `[B, H, W, K]`.
    pub fn predict(&self, store: &ParameterStore, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let out = self.forward(store, &mut tape, images, &NoGrad)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig {
            image_size: (32, 32),
            in_channels: 3,
            patch_size: 4,
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            mlp_ratio: 4,
            head: HeadKind::Segmentation { classes: 3 },
        }
    }

    fn random_images(b: usize, cfg: &BackboneConfig, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = cfg.image_size;
        let n = b * h * w * cfg.in_channels;
        Tensor::new(vec![b, h, w, cfg.in_channels], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn token_count() {
        assert_eq!(small().num_tokens(), 64);
    }

    #[test]
    fn att_count_per_block() {
        let (_, store) = build(small(), 0).unwrap();
        // Oracle: enumerate the att tensors and sum their sizes.
        let expected: usize = block_names(0).att.iter().map(|n| store.tensor(n).unwrap().len()).sum();
        assert_eq!(store.count(Group::BackboneAtt), expected);
        assert_eq!(expected, 4 * (8 * 8 + 8));
    }

    #[test]
    fn group_partition_sums_to_backbone() {
        let (_, store) = build(BackboneConfig::default(), 3).unwrap();
        let parts = store.count(Group::BackboneAtt)
            + store.count(Group::BackboneMlp)
            + store.count(Group::BackboneOther);
        assert_eq!(parts, store.backbone_count());
        assert_eq!(store.backbone_count() + store.count(Group::Head), store.total_count());
    }

    #[test]
    fn same_seed_same_store() {
        let (_, a) = build(small(), 11).unwrap();
        let (_, b) = build(small(), 11).unwrap();
        let (_, c) = build(small(), 12).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small();
        c.patch_size = 5;
        assert!(build(c, 0).is_err());
        let mut c = small();
        c.num_heads = 3;
        assert!(build(c, 0).is_err());
        let mut c = small();
        c.num_blocks = 0;
        assert!(build(c, 0).is_err());
    }

    #[test]
    fn output_shape() {
        let mut cfg = small();
        cfg.head = HeadKind::Segmentation { classes: 5 };
        let (model, store) = build(cfg, 0).unwrap();
        let out = model.predict(&store, &random_images(2, &cfg, 1)).unwrap();
        assert_eq!(out.shape(), &[2, 32, 32, 5]);
        assert!(out.all_finite());
    }

    #[test]
    fn wrong_image_shape_rejected() {
        let (model, store) = build(small(), 0).unwrap();
        let bad = Tensor::zeros(&[1, 16, 32, 3]);
        assert!(matches!(model.predict(&store, &bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_output_projections_make_depth_irrelevant() {
        let imgs = random_images(2, &small(), 5);
        let mut deep_cfg = small();
        deep_cfg.num_blocks = 3;
        let (deep, mut deep_store) = build(deep_cfg, 9).unwrap();
        for l in 0..3 {
            let n = block_names(l);
            for name in [&n.att[6], &n.att[7], &n.mlp[2], &n.mlp[3]] {
                deep_store.get_mut(name).unwrap().tensor.data_mut().fill(0.0);
            }
        }
        // Shallow model sharing embedding, final norm, head and block 0.
        let (shallow, mut shallow_store) = build(small(), 0).unwrap();
        let names: Vec<String> = shallow_store.names().map(str::to_string).collect();
        for name in names {
            shallow_store.get_mut(&name).unwrap().tensor = deep_store.tensor(&name).unwrap().clone();
        }
        let a = deep.predict(&deep_store, &imgs).unwrap();
        let b = shallow.predict(&shallow_store, &imgs).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn upsampling_copies_token_logits() {
        let cfg = small();
        let (model, store) = build(cfg, 2).unwrap();
        let out = model.predict(&store, &random_images(1, &cfg, 3)).unwrap();
        let k = 3;
        let d = out.data();
        for y in 0..32 {
            for x in 0..32 {
                let src = ((y / 4 * 4) * 32 + x / 4 * 4) * k;
                let dst = (y * 32 + x) * k;
                assert_eq!(&d[dst..dst + k], &d[src..src + k]);
            }
        }
    }
}
