//! Oracles and fixtures shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sfa_core::adapter::{attach, param_count, solve_dimension, AdapterConfig, AdapterSites};
use sfa_core::backbone::{build, BackboneConfig, HeadKind};
use sfa_core::selection::{build_pool, SelectionCriterion, SelectionSchedule, Selector};
use sfa_core::store::{Group, ParameterStore};
use sfa_core::tensor::Tensor;
use sfa_core::trainer::BudgetPlan;

pub fn small_backbone(dim_heads: usize, heads: usize, blocks: usize, mlp_ratio: usize) -> BackboneConfig {
    BackboneConfig {
        image_size: (8, 8),
        embed_dim: dim_heads * heads,
        num_blocks: blocks,
        num_heads: heads,
        mlp_ratio,
        head: HeadKind::Segmentation { classes: 3 },
        ..BackboneConfig::default()
    }
}

/// Brute-force oracle: sort every unexcluded index by (score desc, index asc).
pub fn sort_oracle(scores: &[f64], quota: usize, excluded: &[bool]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| !excluded[i]).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(quota);
    idx
}

/// Oracle for the adapter solver: walk d upward until the next one overflows.
pub fn sweep_dimension(budget: usize, dim: usize, blocks: usize, sites: AdapterSites) -> Option<usize> {
    let cost = |d: usize| param_count(dim, blocks, &AdapterConfig { middle_dim: d, sites, ..AdapterConfig::sequential(d) });
    if cost(1) > budget {
        return None;
    }
    let mut d = 1;
    while cost(d + 1) <= budget {
        d += 1;
    }
    Some(d)
}

/// Coarse random gradients for every selectable tensor, so ties are common.
pub fn random_grads(rng: &mut ChaCha8Rng, store: &ParameterStore) -> IndexMap<String, Tensor<f32>> {
    store
        .iter()
        .filter(|(_, p)| p.group.is_selectable())
        .map(|(name, p)| {
            let data = (0..p.tensor.len()).map(|_| rng.gen_range(-3i32..=3) as f32 * 0.5).collect();
            (name.to_string(), Tensor::new(p.tensor.shape().to_vec(), data).unwrap())
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct BudgetTrial {
    pub beta: f64,
    pub rho: f64,
    pub dim_heads: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub mlp_only: bool,
    pub steps: usize,
    pub step_size: usize,
    pub seed: u64,
}

impl BudgetTrial {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            beta: rng.gen_range(0.0..=1.0),
            rho: rng.gen_range(0.0..=1.0),
            dim_heads: rng.gen_range(2..6),
            heads: rng.gen_range(1..3),
            blocks: rng.gen_range(1..4),
            mlp_ratio: rng.gen_range(1..3),
            mlp_only: rng.gen_bool(0.3),
            steps: rng.gen_range(2..40),
            step_size: rng.gen_range(1..12),
            seed: rng.gen(),
        }
    }
}

/// Attaches the solved adapter, runs every selection round on random
/// gradients and checks the budget, solver maximality, monotone disjoint
/// growth and the final mask size. `Err` describes the first violation.
pub fn budget_trial(t: BudgetTrial) -> Result<(), String> {
    let cfg = small_backbone(t.dim_heads, t.heads, t.blocks, t.mlp_ratio);
    let (mut model, mut store) = build(cfg, t.seed).map_err(|e| e.to_string())?;
    let theta = store.backbone_count();
    let plan = BudgetPlan::new(t.beta, t.rho, theta).map_err(|e| e.to_string())?;
    if (plan.beta_external() + plan.beta_internal() - t.beta).abs() > 1e-12 {
        return Err("budget split does not sum to beta".into());
    }
    let sites = if t.mlp_only { AdapterSites::MLP_ONLY } else { AdapterSites::BOTH };
    let oracle = sweep_dimension(plan.external_budget(), cfg.embed_dim, t.blocks, sites);
    match solve_dimension(plan.external_budget(), cfg.embed_dim, t.blocks, sites) {
        Ok(d) => {
            if Some(d) != oracle {
                return Err(format!("solver gave d = {d}, sweep oracle {oracle:?}"));
            }
            let config = AdapterConfig { middle_dim: d, sites, ..AdapterConfig::sequential(d) };
            attach(&mut model, &mut store, config, t.seed).map_err(|e| e.to_string())?;
        }
        Err(_) if oracle.is_none() => {}
        Err(e) => return Err(format!("solver failed ({e}) but the oracle found {oracle:?}")),
    }
    let adapter = store.count(Group::Adapter);
    let schedule = SelectionSchedule::periodic(t.steps, t.step_size).map_err(|e| e.to_string())?;
    let mut selector = Selector::new(
        &store,
        schedule.clone(),
        SelectionCriterion::AccumulatedGradient,
        plan.internal_quota(),
        t.seed,
    )
    .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut previous = selector.mask().clone();
    for step in 1..=t.steps {
        selector.accumulate(&random_grads(&mut rng, &store), step).map_err(|e| e.to_string())?;
        if schedule.round_at(step).is_none() {
            continue;
        }
        let added = selector.run_round(step, &store).map_err(|e| e.to_string())?;
        let mask = selector.mask();
        if (adapter + mask.len()) as f64 > t.beta * theta as f64 + 1e-6 {
            return Err(format!("step {step}: {adapter} + {} exceeds {} * {theta}", mask.len(), t.beta));
        }
        if mask.len() != previous.len() + added.len() {
            return Err(format!("step {step}: mask grew by {} for {} additions", mask.len() - previous.len(), added.len()));
        }
        for (name, sel) in previous.iter() {
            if sel.indices.iter().any(|&i| !mask.contains(name, i as usize)) {
                return Err(format!("step {step}: `{name}` lost a selected index"));
            }
        }
        if added.iter().any(|(name, i)| previous.contains(name, *i)) {
            return Err(format!("step {step}: an index was selected twice"));
        }
        previous = mask.clone();
    }
    let pool = build_pool(&store).map_err(|e| e.to_string())?.len();
    let expected = if schedule.rounds() == 0 { 0 } else { plan.internal_quota().min(pool) };
    if selector.mask().len() != expected {
        return Err(format!("final mask {} != {expected}", selector.mask().len()));
    }
    Ok(())
}
