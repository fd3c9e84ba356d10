//! Fast end-to-end invariant checks on a tiny model, run by `sfa selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{attach, AdapterConfig};
use crate::backbone::{build, BackboneConfig, HeadKind};
use crate::checkpoint::Checkpoint;
use crate::delta::{apply_delta, export_delta, SparseDelta};
use crate::error::Result;
use crate::selection::rank_select;
use crate::store::Group;
use crate::tasks::TaskSpec;
use crate::tensor::Tensor;
use crate::trainer::{run_sfa, BudgetPlan, TaskData, TrainConfig};

fn tiny() -> BackboneConfig {
    BackboneConfig {
        image_size: (16, 16),
        embed_dim: 16,
        num_blocks: 2,
        num_heads: 2,
        head: HeadKind::Segmentation { classes: 5 },
        ..BackboneConfig::default()
    }
}

fn random_images(rng: &mut ChaCha8Rng, b: usize, cfg: &BackboneConfig) -> Tensor<f32> {
    let (h, w) = cfg.image_size;
    let n = b * h * w * cfg.in_channels;
    Tensor::new(vec![b, h, w, cfg.in_channels], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Zero-initialized sequential adapters leave every output bit unchanged.
pub fn identity_at_init(config: BackboneConfig, batches: usize, seed: u64) -> Result<bool> {
    let (model, store) = build(config, seed)?;
    let (mut adapted, mut astore) = (model.clone(), store.clone());
    attach(&mut adapted, &mut astore, AdapterConfig::sequential(4), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1de7);
    for _ in 0..batches {
        let x = random_images(&mut rng, 2, &config);
        if !model.predict(&store, &x)?.bit_eq(&adapted.predict(&astore, &x)?) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn rank_select_matches_sort(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..50).all(|_| {
        let n = rng.gen_range(1..200);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64).collect();
        let excluded: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
        let quota = rng.gen_range(0..=n);
        let mut oracle: Vec<usize> = (0..n).filter(|&i| !excluded[i]).collect();
        oracle.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        oracle.truncate(quota);
        rank_select(&scores, quota, &excluded) == oracle
    })
}

/// `(name, passed)` for each check.
pub fn quick_suite(seed: u64) -> Result<Vec<(&'static str, bool)>> {
    let mut out = vec![
        ("identity at init", identity_at_init(tiny(), 3, seed)?),
        ("rank_select vs sort oracle", rank_select_matches_sort(seed)),
    ];

    let spec = TaskSpec {
        image_size: (16, 16),
        shape_size: (2.0, 5.0),
        train_size: 16,
        val_size: 4,
        ..TaskSpec::target_segmentation(seed)
    };
    let data = TaskData::generate(&spec)?;
    let (model, store) = build(tiny(), seed)?;
    let base = Checkpoint::new(model, store);
    let bytes = base.to_bytes()?;
    let back = Checkpoint::from_bytes(&bytes)?;
    out.push(("checkpoint roundtrip", back.store.bit_eq(&base.store) && back.to_bytes()? == bytes));

    let cfg = TrainConfig { steps: 6, batch_size: 2, step_size: Some(2), beta: 0.2, eval_batch: 4, seed, ..TrainConfig::default() };
    let run = run_sfa(&base, &data, &cfg)?;
    let plan = BudgetPlan::new(cfg.beta, cfg.rho, base.store.backbone_count())?;
    out.push((
        "budget respected",
        plan.check(run.store.count(Group::Adapter), run.mask.len()).is_ok() && run.mask.len() == plan.internal_quota(),
    ));
    let mut frozen_ok = true;
    for (name, p) in run.store.iter().filter(|(_, p)| p.group.is_backbone()) {
        let b = base.store.tensor(name)?;
        for (i, (x, y)) in p.tensor.data().iter().zip(b.data()).enumerate() {
            frozen_ok &= run.mask.contains(name, i) || x.to_bits() == y.to_bits();
        }
    }
    out.push(("unselected scalars untouched", frozen_ok));
    let delta = SparseDelta::from_bytes(&export_delta(&run.model, &run.store, &run.mask, &base)?.to_bytes()?)?;
    out.push(("delta roundtrip", apply_delta(&base, &delta)?.store.bit_eq(&run.store)));
    let again = run_sfa(&base, &data, &cfg)?;
    out.push(("determinism", again.mask == run.mask && again.store.bit_eq(&run.store)));
    Ok(out)
}
