//! External feature adapters: residual bottleneck MLPs on the block stream.
//!
//! A sequential adapter maps a feature `x` to `x + up(relu(down(x)))` and sits
//! after the residual add of the attention and/or MLP sub-layer. The parallel
//! variant runs the same bottleneck beside the block MLP, reading the
//! normalized MLP input, and adds `scale * branch` to the MLP output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{uniform_fan_in, Model};
use crate::error::{Error, Result};
use crate::store::{Group, ParameterStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const DEFAULT_PARALLEL_SCALE: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AdapterStyle {
    SequentialResidual,
    ParallelScaled { scale: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSites {
    pub after_att: bool,
    pub after_mlp: bool,
}

impl AdapterSites {
    pub const BOTH: Self = Self { after_att: true, after_mlp: true };
    pub const MLP_ONLY: Self = Self { after_att: false, after_mlp: true };

    pub fn count(self) -> usize {
        self.after_att as usize + self.after_mlp as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub middle_dim: usize,
    pub style: AdapterStyle,
    pub sites: AdapterSites,
}

impl AdapterConfig {
    pub fn sequential(middle_dim: usize) -> Self {
        Self { middle_dim, style: AdapterStyle::SequentialResidual, sites: AdapterSites::BOTH }
    }

    pub fn parallel(middle_dim: usize, scale: f32) -> Self {
        Self { middle_dim, style: AdapterStyle::ParallelScaled { scale }, sites: AdapterSites::MLP_ONLY }
    }

    pub fn validate(&self) -> Result<()> {
        if self.middle_dim == 0 {
            return Err(Error::InvalidConfig("adapter middle_dim must be >= 1".into()));
        }
        if self.sites.count() == 0 {
            return Err(Error::InvalidConfig("adapter needs at least one site".into()));
        }
        if matches!(self.style, AdapterStyle::ParallelScaled { .. }) && self.sites != AdapterSites::MLP_ONLY {
            return Err(Error::InvalidConfig("parallel adapters attach beside the MLP only".into()));
        }
        Ok(())
    }
}

/// Where an adapter sits inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Att,
    Mlp,
}

impl Site {
    fn tag(self) -> &'static str {
        match self {
            Site::Att => "att",
            Site::Mlp => "mlp",
        }
    }
}

/// Parameter names of one adapter: `[down.weight, down.bias, up.weight, up.bias]`.
pub fn site_names(layer: usize, site: Site) -> [String; 4] {
    let p = format!("blocks.{layer}.adapter_{}", site.tag());
    [
        format!("{p}.down.weight"),
        format!("{p}.down.bias"),
        format!("{p}.up.weight"),
        format!("{p}.up.bias"),
    ]
}

/// Weights of one adapter site, `W_down: [D, d]`, `W_up: [d, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    pub down_w: Tensor<f32>,
    pub down_b: Tensor<f32>,
    pub up_w: Tensor<f32>,
    pub up_b: Tensor<f32>,
}

impl AdapterWeights {
    fn check(&self, dim: usize) -> Result<usize> {
        let d = self.down_b.len();
        let ok = self.down_w.shape() == [dim, d]
            && self.up_w.shape() == [d, dim]
            && self.up_b.shape() == [dim]
            && self.down_b.shape() == [d];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "adapter_forward",
                detail: format!(
                    "D = {dim}: down {:?}/{:?}, up {:?}/{:?}",
                    self.down_w.shape(),
                    self.down_b.shape(),
                    self.up_w.shape(),
                    self.up_b.shape()
                ),
            });
        }
        Ok(d)
    }
}

/// Bottleneck branch `up(relu(down(x)))` on the tape.
pub(crate) fn branch(tape: &mut Tape, x: NodeId, w: &[NodeId; 4]) -> Result<NodeId> {
    let down = tape.linear(x, w[0], w[1])?;
    let act = tape.relu(down);
    tape.linear(act, w[2], w[3])
}

/// Sequential residual adapter on the tape: `x + branch(x)`.
pub(crate) fn residual(tape: &mut Tape, x: NodeId, w: &[NodeId; 4]) -> Result<NodeId> {
    let b = branch(tape, x, w)?;
    tape.add(x, b)
}

/// Applies one sequential residual adapter to `x` of shape `[..., D]`.
pub fn adapter_forward(x: &Tensor<f32>, weights: &AdapterWeights) -> Result<Tensor<f32>> {
    weights.check(x.last_dim())?;
    let mut tape = Tape::new();
    let xi = tape.leaf(x.clone(), false);
    let w = [
        tape.leaf(weights.down_w.clone(), false),
        tape.leaf(weights.down_b.clone(), false),
        tape.leaf(weights.up_w.clone(), false),
        tape.leaf(weights.up_b.clone(), false),
    ];
    let out = residual(&mut tape, xi, &w)?;
    Ok(tape.value(out).clone())
}

/// Scalar count of the adapters `config` would add to a model.
pub fn param_count(embed_dim: usize, num_blocks: usize, config: &AdapterConfig) -> usize {
    let per_site = 2 * embed_dim * config.middle_dim + config.middle_dim + embed_dim;
    num_blocks * config.sites.count() * per_site
}

/// Registers zero-initialized-up-projection adapters and switches the model's
/// block wiring to use them.
pub fn attach(model: &mut Model, store: &mut ParameterStore, config: AdapterConfig, seed: u64) -> Result<()> {
    if model.adapter.is_some() || store.count(Group::Adapter) > 0 {
        return Err(Error::AlreadyAttached);
    }
    config.validate()?;
    let dim = model.config.embed_dim;
    let d = config.middle_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada9_7e55);
    for layer in 0..model.config.num_blocks {
        let mut sites = Vec::new();
        if config.sites.after_att {
            sites.push(Site::Att);
        }
        if config.sites.after_mlp {
            sites.push(Site::Mlp);
        }
        for site in sites {
            let [dw, db, uw, ub] = site_names(layer, site);
            let l = Some(layer);
            store.insert(dw, uniform_fan_in(&mut rng, &[dim, d], dim), Group::Adapter, l)?;
            store.insert(db, Tensor::zeros(&[d]), Group::Adapter, l)?;
            store.insert(uw, Tensor::zeros(&[d, dim]), Group::Adapter, l)?;
            store.insert(ub, Tensor::zeros(&[dim]), Group::Adapter, l)?;
        }
    }
    model.adapter = Some(config);
    Ok(())
}

/// Largest `d >= 1` whose adapters fit in `budget` scalars.
pub fn solve_dimension(budget: usize, embed_dim: usize, num_blocks: usize, sites: AdapterSites) -> Result<usize> {
    let copies = num_blocks * sites.count();
    if copies == 0 || embed_dim == 0 {
        return Err(Error::InvalidConfig("adapter dimension solve needs blocks, sites and D > 0".into()));
    }
    // copies * ((2D + 1) d + D) <= budget
    let fixed = copies * embed_dim;
    let per_d = copies * (2 * embed_dim + 1);
    let minimum = fixed + per_d;
    if budget < minimum {
        return Err(Error::InfeasibleBudget { budget, minimum });
    }
    Ok((budget - fixed) / per_d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn hand_computed_forward() {
        let w = AdapterWeights {
            down_w: t(&[2, 1], &[1.0, 1.0]),
            down_b: t(&[1], &[0.0]),
            up_w: t(&[1, 2], &[1.0, 0.0]),
            up_b: t(&[2], &[0.0, 0.0]),
        };
        let out = adapter_forward(&t(&[1, 2], &[1.0, 2.0]), &w).unwrap();
        assert_eq!(out.data(), &[4.0, 2.0]);
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let x = t(&[2, 3], &[0.3, -1.2, 7.5, 1e-3, -4.0, 2.5]);
        let w = AdapterWeights {
            down_w: t(&[3, 2], &[0.5, -0.1, 0.2, 0.9, -0.7, 0.4]),
            down_b: t(&[2], &[0.1, -0.2]),
            up_w: Tensor::zeros(&[2, 3]),
            up_b: Tensor::zeros(&[3]),
        };
        assert!(adapter_forward(&x, &w).unwrap().bit_eq(&x));
    }

    #[test]
    fn negative_preactivation_kills_branch() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let w = AdapterWeights {
            down_w: t(&[2, 1], &[-1.0, -1.0]),
            down_b: t(&[1], &[-0.5]),
            up_w: t(&[1, 2], &[3.0, 4.0]),
            up_b: t(&[2], &[0.0, 0.0]),
        };
        assert!(adapter_forward(&x, &w).unwrap().bit_eq(&x));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let w = AdapterWeights {
            down_w: Tensor::zeros(&[3, 1]),
            down_b: Tensor::zeros(&[1]),
            up_w: Tensor::zeros(&[1, 3]),
            up_b: Tensor::zeros(&[3]),
        };
        assert!(matches!(
            adapter_forward(&Tensor::zeros(&[1, 2]), &w),
            Err(Error::ShapeMismatch { op: "adapter_forward", .. })
        ));
    }

    #[test]
    fn solve_dimension_worked_example() {
        // 5% of 100 000 with L = 4, D = 64 and both sites.
        assert_eq!(solve_dimension(5_000, 64, 4, AdapterSites::BOTH).unwrap(), 4);
        let cfg = AdapterConfig::sequential(4);
        assert_eq!(param_count(64, 4, &cfg), 4_640);
        assert!(param_count(64, 4, &AdapterConfig::sequential(5)) > 5_000);
    }

    #[test]
    fn zero_budget_is_infeasible() {
        let err = solve_dimension(0, 64, 4, AdapterSites::BOTH).unwrap_err();
        assert!(matches!(err, Error::InfeasibleBudget { minimum: 1_544, .. }), "{err}");
    }

    #[test]
    fn single_site_halves_the_copies() {
        let both = solve_dimension(20_000, 16, 2, AdapterSites::BOTH).unwrap();
        let one = solve_dimension(20_000, 16, 2, AdapterSites::MLP_ONLY).unwrap();
        assert!(one > both);
        assert!(param_count(16, 2, &AdapterConfig::parallel(one, 0.1)) <= 20_000);
        assert!(param_count(16, 2, &AdapterConfig::parallel(one + 1, 0.1)) > 20_000);
    }

    #[test]
    fn parallel_style_rejects_attention_site() {
        let mut cfg = AdapterConfig::parallel(4, 0.1);
        cfg.sites = AdapterSites::BOTH;
        assert!(cfg.validate().is_err());
    }
}
