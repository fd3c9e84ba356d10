//! Budgeted adaptation runs and the baselines they are compared against.
//!
//! Every run starts from a pretrained checkpoint, re-initializes the task
//! head, optionally attaches adapters and selects backbone scalars, and
//! trains only what the method allows. Everything else stays bit-identical
//! to the checkpoint.

use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterConfig, AdapterSites, DEFAULT_PARALLEL_SCALE};
use crate::backbone::{build, uniform_fan_in, BackboneConfig, HeadKind, Model, HEAD_BIAS, HEAD_WEIGHT};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::selection::{build_pool, SelectionCriterion, SelectionMask, SelectionSchedule, Selector};
use crate::store::{Group, Param, ParameterStore};
use crate::tape::Tape;
use crate::tasks::{Confusion, Dataset, Label, TaskKind, TaskSpec};
use crate::tensor::Tensor;

/// Split of a parameter budget between adapters and selected scalars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub beta: f64,
    pub rho: f64,
    /// Backbone scalar count the fractions refer to (head excluded).
    pub total_params: usize,
}

impl BudgetPlan {
    pub fn new(beta: f64, rho: f64, total_params: usize) -> Result<Self> {
        for (name, v) in [("beta", beta), ("rho", rho)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(Self { beta, rho, total_params })
    }

    pub fn beta_external(&self) -> f64 {
        self.rho * self.beta
    }

    pub fn beta_internal(&self) -> f64 {
        self.beta - self.beta_external()
    }

    /// Largest adapter size allowed, in scalars.
    pub fn external_budget(&self) -> usize {
        (self.beta_external() * self.total_params as f64).floor() as usize
    }

    /// Final mask size.
    pub fn internal_quota(&self) -> usize {
        (self.beta_internal() * self.total_params as f64).floor() as usize
    }

    pub fn ceiling(&self) -> f64 {
        self.beta * self.total_params as f64
    }

    pub fn check(&self, adapter: usize, mask: usize) -> Result<()> {
        let used = adapter + mask;
        // The slack absorbs rounding in `beta * total`; counts are integers.
        if used as f64 > self.ceiling() + 1e-6 {
            return Err(Error::BudgetViolation { used, ceiling: self.ceiling() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Periodic,
    /// A single round right after the first step.
    UpFront,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sfa,
    Frozen,
    FullFinetune,
    ExternalOnly,
    InternalOnly,
    AdaptformerStyle,
    ImportedMask,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sfa => "sfa",
            Method::Frozen => "frozen",
            Method::FullFinetune => "full_finetune",
            Method::ExternalOnly => "external_only",
            Method::InternalOnly => "internal_only",
            Method::AdaptformerStyle => "adaptformer_style",
            Method::ImportedMask => "imported_mask",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let m = match s.replace('-', "_").as_str() {
            "sfa" => Method::Sfa,
            "frozen" => Method::Frozen,
            "full_finetune" | "full" => Method::FullFinetune,
            "external_only" | "external" => Method::ExternalOnly,
            "internal_only" | "internal" => Method::InternalOnly,
            "adaptformer_style" | "adaptformer" => Method::AdaptformerStyle,
            "imported_mask" => Method::ImportedMask,
            _ => return Err(Error::InvalidConfig(format!("unknown method `{s}`"))),
        };
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub beta: f64,
    pub rho: f64,
    /// Selection period `s`; `None` means `max(50, T / 5)`.
    pub step_size: Option<usize>,
    pub schedule: ScheduleKind,
    pub criterion: SelectionCriterion,
    /// When false, no external adapters are attached.
    pub adapters: bool,
    /// Forces the adapter middle dimension instead of solving it from the budget.
    pub adapter_dim: Option<usize>,
    /// Evaluation period; `None` means the selection period.
    pub eval_every: Option<usize>,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2_000,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            seed: 0,
            beta: 0.05,
            rho: 0.5,
            step_size: None,
            schedule: ScheduleKind::Periodic,
            criterion: SelectionCriterion::AccumulatedGradient,
            adapters: true,
            adapter_dim: None,
            eval_every: None,
            eval_batch: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::InvalidConfig("batch sizes must be >= 1".into()));
        }
        if self.step_size == Some(0) || self.eval_every == Some(0) {
            return Err(Error::InvalidConfig("step size and eval period must be >= 1".into()));
        }
        BudgetPlan::new(self.beta, self.rho, 0).map(|_| ())
    }

    pub fn step_size(&self) -> usize {
        self.step_size.unwrap_or_else(|| SelectionSchedule::default_step_size(self.steps))
    }

    pub fn selection_schedule(&self) -> Result<SelectionSchedule> {
        match self.schedule {
            ScheduleKind::Periodic => SelectionSchedule::periodic(self.steps, self.step_size()),
            ScheduleKind::UpFront => SelectionSchedule::up_front(self.steps),
        }
    }
}

/// Train and validation samples of one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Dataset,
    pub val: Dataset,
}

impl TaskData {
    pub fn generate(spec: &TaskSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { train: Dataset::train(spec)?, val: Dataset::val(spec)? })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.train.spec
    }

    pub fn head_kind(&self) -> HeadKind {
        head_kind(self.spec())
    }
}

pub fn head_kind(spec: &TaskSpec) -> HeadKind {
    match spec.kind {
        TaskKind::ShapesSegmentation { classes, .. } => HeadKind::Segmentation { classes },
        TaskKind::ShapesDepth { .. } => HeadKind::Regression,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "metric", content = "value")]
pub enum Metrics {
    Miou(f64),
    Rmse(f64),
}

impl Metrics {
    pub fn value(self) -> f64 {
        match self {
            Metrics::Miou(v) | Metrics::Rmse(v) => v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metrics::Miou(_) => "miou",
            Metrics::Rmse(_) => "rmse",
        }
    }
}

/// mIoU (dataset-level confusion) for segmentation heads, RMSE for regression.
pub fn evaluate(model: &Model, store: &ParameterStore, data: &Dataset, batch: usize) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyValidationSet);
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    match model.config.head {
        HeadKind::Segmentation { classes } => {
            let mut confusion = Confusion::new(classes);
            for chunk in indices.chunks(batch.max(1)) {
                let (images, label) = data.batch(chunk);
                let Label::Classes(gt) = label else {
                    return Err(Error::InvalidConfig("segmentation head on a depth task".into()));
                };
                let out = model.predict(store, &images)?;
                let pred: Vec<usize> = out.data().chunks(classes).map(argmax).collect();
                confusion.add(&pred, &gt)?;
            }
            Ok(Metrics::Miou(confusion.miou()))
        }
        HeadKind::Regression => {
            let (mut sq, mut n) = (0.0f64, 0usize);
            for chunk in indices.chunks(batch.max(1)) {
                let (images, label) = data.batch(chunk);
                let Label::Depth(gt) = label else {
                    return Err(Error::InvalidConfig("regression head on a segmentation task".into()));
                };
                let out = model.predict(store, &images)?;
                sq += out.data().iter().zip(&gt).map(|(&p, &g)| (p as f64 - g as f64).powi(2)).sum::<f64>();
                n += gt.len();
            }
            Ok(Metrics::Rmse((sq / n as f64).sqrt()))
        }
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Loss and gradients of one step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f32,
    pub grads: IndexMap<String, Tensor<f32>>,
}

/// Forward, loss and backward on one batch. Gradients are produced for
/// parameters accepted by `wants_grad` only.
pub fn compute_gradients(
    model: &Model,
    store: &ParameterStore,
    images: &Tensor<f32>,
    label: &Label,
    wants_grad: &dyn Fn(&str, &Param) -> bool,
    step: usize,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let out = model.forward(store, &mut tape, images, wants_grad)?;
    let loss = match (label, model.config.head) {
        (Label::Classes(c), HeadKind::Segmentation { .. }) => tape.cross_entropy(out, c)?,
        (Label::Depth(d), HeadKind::Regression) => tape.mse(out, d)?,
        _ => return Err(Error::InvalidConfig("head kind does not match the task labels".into())),
    };
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step, value });
    }
    let grads = tape.backward(loss)?.into_params();
    for (name, g) in &grads {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { step, tensor: name.clone() });
        }
    }
    Ok(StepOutput { loss: value, grads })
}

/// One optimizer step touching only what `opt` holds state for.
/// `extra_grad` requests gradients beyond the trainable set (for scoring).
#[allow(clippy::too_many_arguments)]
pub fn masked_step(
    model: &Model,
    store: &mut ParameterStore,
    images: &Tensor<f32>,
    label: &Label,
    opt: &mut AdamW,
    lr: f32,
    extra_grad: &dyn Fn(&str, &Param) -> bool,
    step: usize,
) -> Result<StepOutput> {
    let out = {
        let wants = |name: &str, p: &Param| opt.is_trainable(name) || extra_grad(name, p);
        compute_gradients(model, store, images, label, &wants, step)?
    };
    opt.step(store, &out.grads, lr)?;
    Ok(out)
}

/// Per-epoch seeded shuffles; the last partial batch of an epoch is dropped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Self {
        let batch = batch.clamp(1, len.max(1));
        let mut s = Self { order: (0..len).collect(), pos: 0, batch, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Mean training loss since the previous evaluation.
    pub loss: f64,
    pub metric: f64,
    pub trainable_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainableCounts {
    /// Backbone scalars, head excluded.
    pub backbone_total: usize,
    pub adapter: usize,
    pub mask: usize,
    /// Backbone scalars trained densely (full fine-tuning only).
    pub dense_backbone: usize,
    pub head: usize,
}

impl TrainableCounts {
    /// Trainable scalars counted against the budget.
    pub fn backbone_side(&self) -> usize {
        self.adapter + self.mask + self.dense_backbone
    }

    pub fn total(&self) -> usize {
        self.backbone_side() + self.head
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layer: usize,
    pub att_selected: usize,
    pub att_pool: usize,
    pub mlp_selected: usize,
    pub mlp_pool: usize,
}

impl LayerSelection {
    pub fn att_fraction(&self) -> f64 {
        self.att_selected as f64 / self.att_pool.max(1) as f64
    }

    pub fn mlp_fraction(&self) -> f64 {
        self.mlp_selected as f64 / self.mlp_pool.max(1) as f64
    }
}

/// Selected counts per layer and group.
pub fn layer_selection(store: &ParameterStore, mask: &SelectionMask) -> Result<Vec<LayerSelection>> {
    let pool = build_pool(store)?;
    let mut out: Vec<LayerSelection> = (0..pool.num_layers())
        .map(|layer| LayerSelection {
            layer,
            att_selected: 0,
            att_pool: pool.layer_group_size(layer, Group::BackboneAtt),
            mlp_selected: 0,
            mlp_pool: pool.layer_group_size(layer, Group::BackboneMlp),
        })
        .collect();
    for (name, sel) in mask.iter() {
        let p = store.get(name)?;
        let Some(layer) = p.layer else { continue };
        match p.group {
            Group::BackboneAtt => out[layer].att_selected += sel.indices.len(),
            Group::BackboneMlp => out[layer].mlp_selected += sel.indices.len(),
            _ => return Err(Error::MaskMismatch(format!("`{name}` is not an att/mlp tensor"))),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Method label; an SFA run with nothing trainable in the backbone is
    /// reported as `frozen`.
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub steps: usize,
    pub beta: f64,
    pub rho: f64,
    pub step_size: usize,
    pub selection_rounds: usize,
    pub criterion: SelectionCriterion,
    pub adapter: Option<AdapterConfig>,
    pub budget_ceiling: Option<f64>,
    pub metric: String,
    pub final_metric: f64,
    pub history: Vec<EvalPoint>,
    pub counts: TrainableCounts,
    pub layers: Vec<LayerSelection>,
    pub wall_clock_secs: f64,
}

/// Result of an adaptation run.
#[derive(Debug, Clone)]
pub struct Adapted {
    pub model: Model,
    pub store: ParameterStore,
    pub mask: SelectionMask,
    pub report: RunReport,
}

impl Adapted {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.model.clone(), self.store.clone())
    }
}

/// Replaces the head with a fresh one for `kind`, drawn from `seed`.
pub fn reinit_head(model: &mut Model, store: &mut ParameterStore, kind: HeadKind, seed: u64) -> Result<()> {
    let d = model.config.embed_dim;
    let k = kind.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4ead_5eed);
    for (name, tensor) in [(HEAD_WEIGHT, uniform_fan_in(&mut rng, &[d, k], d)), (HEAD_BIAS, Tensor::zeros(&[k]))] {
        let p = store.get_mut(name)?;
        p.tensor = tensor;
    }
    model.config.head = kind;
    Ok(())
}

struct Setup {
    model: Model,
    store: ParameterStore,
    opt: AdamW,
    plan: Option<BudgetPlan>,
    selector: Option<Selector>,
    mask: SelectionMask,
    dense_backbone: usize,
}

fn setup(base: &Checkpoint, data: &TaskData, cfg: &TrainConfig, method: Method, imported: Option<&SelectionMask>) -> Result<Setup> {
    cfg.validate()?;
    if base.model.adapter.is_some() || base.store.count(Group::Adapter) > 0 {
        return Err(Error::AlreadyAttached);
    }
    let mut model = base.model.clone();
    let mut store = base.store.clone();
    reinit_head(&mut model, &mut store, data.head_kind(), cfg.seed)?;
    let total = store.backbone_count();
    let mut opt = AdamW::new(cfg.optimizer);

    let (beta, rho) = (cfg.beta, cfg.rho);
    let plan = match method {
        Method::Frozen | Method::FullFinetune => None,
        Method::Sfa | Method::ImportedMask => Some(BudgetPlan::new(beta, rho, total)?),
        Method::ExternalOnly | Method::AdaptformerStyle => Some(BudgetPlan::new(beta, 1.0, total)?),
        Method::InternalOnly => Some(BudgetPlan::new(beta, 0.0, total)?),
    };

    let adapter_cfg = match method {
        Method::Sfa | Method::ImportedMask | Method::ExternalOnly if cfg.adapters => {
            let plan = plan.expect("budgeted method");
            let sites = AdapterSites::BOTH;
            let d = match cfg.adapter_dim {
                Some(d) => d,
                None => adapter::solve_dimension(plan.external_budget(), model.config.embed_dim, model.config.num_blocks, sites)?,
            };
            Some(AdapterConfig::sequential(d))
        }
        Method::AdaptformerStyle => {
            let plan = plan.expect("budgeted method");
            let sites = AdapterSites::MLP_ONLY;
            let d = match cfg.adapter_dim {
                Some(d) => d,
                None => adapter::solve_dimension(plan.external_budget(), model.config.embed_dim, model.config.num_blocks, sites)?,
            };
            Some(AdapterConfig::parallel(d, DEFAULT_PARALLEL_SCALE))
        }
        _ => None,
    };
    if let Some(a) = adapter_cfg {
        adapter::attach(&mut model, &mut store, a, cfg.seed)?;
    }

    let mut dense_backbone = 0;
    let names: Vec<(String, Group)> = store.iter().map(|(n, p)| (n.to_string(), p.group)).collect();
    for (name, group) in &names {
        let dense = match group {
            Group::Head | Group::Adapter => true,
            _ => method == Method::FullFinetune,
        };
        if dense {
            opt.enable_dense(&store, name)?;
            if group.is_backbone() {
                dense_backbone += store.tensor(name)?.len();
            }
        }
    }

    let mut mask = SelectionMask::new();
    let mut selector = None;
    match method {
        Method::ImportedMask => {
            let m = imported.ok_or_else(|| Error::InvalidConfig("imported-mask run without a mask".into()))?;
            m.validate_against(&store)?;
            for (name, sel) in m.iter() {
                let idx: Vec<usize> = sel.indices.iter().map(|&i| i as usize).collect();
                opt.enable_indices(&store, name, &idx)?;
            }
            mask = m.clone();
        }
        Method::Sfa | Method::InternalOnly => {
            let quota = plan.expect("budgeted method").internal_quota();
            if quota > 0 {
                let schedule = cfg.selection_schedule()?;
                selector = Some(Selector::new(&store, schedule, cfg.criterion, quota, cfg.seed)?);
            }
        }
        _ => {}
    }
    if let Some(plan) = &plan {
        plan.check(store.count(Group::Adapter), mask.len())?;
    }
    Ok(Setup { model, store, opt, plan, selector, mask, dense_backbone })
}

fn label_for(method: Method, counts: &TrainableCounts) -> String {
    if method == Method::Sfa && counts.backbone_side() == 0 {
        Method::Frozen.as_str().to_string()
    } else {
        method.as_str().to_string()
    }
}

/// Adapts `base` to `data` with `method`. `imported` is required for
/// [`Method::ImportedMask`] and ignored otherwise.
pub fn adapt(
    base: &Checkpoint,
    data: &TaskData,
    cfg: &TrainConfig,
    method: Method,
    imported: Option<&SelectionMask>,
) -> Result<Adapted> {
    let started = Instant::now();
    let Setup { model, mut store, mut opt, plan, mut selector, mut mask, dense_backbone } =
        setup(base, data, cfg, method, imported)?;
    let adapter_count = store.count(Group::Adapter);
    let head_count = store.count(Group::Head);
    let counts_now = |mask_len: usize| TrainableCounts {
        backbone_total: base.store.backbone_count(),
        adapter: adapter_count,
        mask: mask_len,
        dense_backbone,
        head: head_count,
    };

    let eval_every = cfg.eval_every.unwrap_or_else(|| cfg.step_size());
    let mut sampler = BatchSampler::new(data.train.len(), cfg.batch_size, cfg.seed ^ 0x0ba7_c4e5);
    let mut history = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0f64, 0usize);

    for step in 1..=cfg.steps {
        let (images, label) = data.train.batch(sampler.next_batch());
        let lr = cfg.optimizer.lr_at(step, cfg.steps);
        let scoring = selector.as_ref().is_some_and(|s| s.wants_scores(step));
        let extra = |_: &str, p: &Param| scoring && p.group.is_selectable();
        let out = masked_step(&model, &mut store, &images, &label, &mut opt, lr, &extra, step)?;
        loss_sum += out.loss as f64;
        loss_n += 1;

        if let Some(sel) = selector.as_mut() {
            if scoring {
                sel.accumulate(&out.grads, step)?;
            }
            if sel.schedule().round_at(step).is_some() {
                let additions = sel.run_round(step, &store)?;
                let mut by_tensor: IndexMap<&str, Vec<usize>> = IndexMap::new();
                for (name, i) in &additions {
                    by_tensor.entry(name.as_str()).or_default().push(*i);
                }
                for (name, idx) in by_tensor {
                    opt.enable_indices(&store, name, &idx)?;
                }
                mask = sel.mask().clone();
                if let Some(plan) = &plan {
                    plan.check(adapter_count, mask.len())?;
                }
            }
        }

        if step % eval_every == 0 || step == cfg.steps {
            let metric = evaluate(&model, &store, &data.val, cfg.eval_batch)?;
            history.push(EvalPoint {
                step,
                loss: loss_sum / loss_n.max(1) as f64,
                metric: metric.value(),
                trainable_count: counts_now(mask.len()).total(),
            });
            loss_sum = 0.0;
            loss_n = 0;
        }
    }

    let counts = counts_now(mask.len());
    let final_metric = evaluate(&model, &store, &data.val, cfg.eval_batch)?;
    let schedule_rounds = selector.as_ref().map_or(0, |s| s.schedule().rounds());
    let report = RunReport {
        method: label_for(method, &counts),
        task: data.spec().name.clone(),
        seed: cfg.seed,
        steps: cfg.steps,
        beta: plan.map_or(if method == Method::FullFinetune { 1.0 } else { 0.0 }, |p| p.beta),
        rho: plan.map_or(0.0, |p| p.rho),
        step_size: cfg.step_size(),
        selection_rounds: schedule_rounds,
        criterion: cfg.criterion,
        adapter: model.adapter,
        budget_ceiling: plan.map(|p| p.ceiling()),
        metric: final_metric.name().to_string(),
        final_metric: final_metric.value(),
        history,
        counts,
        layers: layer_selection(&store, &mask)?,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(Adapted { model, store, mask, report })
}

/// The full method: external adapters plus progressive selection.
pub fn run_sfa(base: &Checkpoint, data: &TaskData, cfg: &TrainConfig) -> Result<Adapted> {
    adapt(base, data, cfg, Method::Sfa, None)
}

pub fn run_baseline(base: &Checkpoint, data: &TaskData, cfg: &TrainConfig, kind: Method) -> Result<Adapted> {
    if matches!(kind, Method::Sfa | Method::ImportedMask) {
        return Err(Error::InvalidConfig(format!("`{}` is not a baseline", kind.as_str())));
    }
    adapt(base, data, cfg, kind, None)
}

/// Trains adapters, head and the scalars of `mask` without any selection.
pub fn adapt_with_mask(base: &Checkpoint, data: &TaskData, cfg: &TrainConfig, mask: &SelectionMask) -> Result<Adapted> {
    adapt(base, data, cfg, Method::ImportedMask, Some(mask))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub task: String,
    pub seed: u64,
    pub steps: usize,
    pub initial_metric: f64,
    pub final_metric: f64,
    pub wall_clock_secs: f64,
}

/// Trains every parameter of a freshly built model on `data`.
pub fn pretrain(
    config: BackboneConfig,
    data: &TaskData,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, PretrainReport)> {
    // Zero steps is allowed here and yields the initialization.
    TrainConfig { steps: cfg.steps.max(1), ..cfg.clone() }.validate()?;
    let started = Instant::now();
    let config = BackboneConfig { head: data.head_kind(), ..config };
    let (model, mut store) = build(config, cfg.seed)?;
    let initial = evaluate(&model, &store, &data.val, cfg.eval_batch)?;
    let mut opt = AdamW::new(cfg.optimizer);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        opt.enable_dense(&store, name)?;
    }
    let mut sampler = BatchSampler::new(data.train.len(), cfg.batch_size, cfg.seed ^ 0x0ba7_c4e5);
    for step in 1..=cfg.steps {
        let (images, label) = data.train.batch(sampler.next_batch());
        let lr = cfg.optimizer.lr_at(step, cfg.steps);
        masked_step(&model, &mut store, &images, &label, &mut opt, lr, &|_, _| false, step)?;
    }
    let fin = evaluate(&model, &store, &data.val, cfg.eval_batch)?;
    let report = PretrainReport {
        task: data.spec().name.clone(),
        seed: cfg.seed,
        steps: cfg.steps,
        initial_metric: initial.value(),
        final_metric: fin.value(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((Checkpoint::new(model, store), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::sgd_step;
    use crate::tasks::TaskSpec;

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            image_size: (16, 16),
            embed_dim: 16,
            num_blocks: 2,
            num_heads: 2,
            ..BackboneConfig::default()
        }
    }

    fn tiny_task() -> TaskData {
        let spec = TaskSpec {
            image_size: (16, 16),
            shape_size: (2.0, 5.0),
            train_size: 32,
            val_size: 8,
            ..TaskSpec::target_segmentation(3)
        };
        TaskData::generate(&spec).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { steps: 12, batch_size: 4, step_size: Some(4), eval_batch: 8, beta: 0.2, ..TrainConfig::default() }
    }

    fn base() -> Checkpoint {
        let data = tiny_task();
        let (model, store) = build(BackboneConfig { head: data.head_kind(), ..tiny_backbone() }, 1).unwrap();
        Checkpoint::new(model, store)
    }

    #[test]
    fn budget_split() {
        let p = BudgetPlan::new(0.10, 0.5, 1000).unwrap();
        assert_eq!(p.beta_external(), 0.05);
        assert_eq!(p.beta_internal(), 0.05);
        assert_eq!((p.external_budget(), p.internal_quota()), (50, 50));
        assert!(p.check(50, 50).is_ok());
        assert!(matches!(p.check(51, 50), Err(Error::BudgetViolation { used: 101, .. })));
        assert!(BudgetPlan::new(1.5, 0.5, 10).is_err());
    }

    #[test]
    fn sampler_covers_epoch_without_repeats() {
        let mut s = BatchSampler::new(10, 3, 0);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch().to_vec()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn evaluate_perfect_and_offset() {
        let data = tiny_task();
        // Constant predictions through a zero head: class 0 everywhere.
        let mut ck = base();
        for name in [HEAD_WEIGHT, HEAD_BIAS] {
            ck.store.get_mut(name).unwrap().tensor.data_mut().fill(0.0);
        }
        let m = evaluate(&ck.model, &ck.store, &data.val, 4).unwrap();
        assert!((0.0..=1.0).contains(&m.value()));
        let empty = Dataset { spec: data.val.spec.clone(), images: vec![], labels: vec![] };
        assert!(matches!(evaluate(&ck.model, &ck.store, &empty, 4), Err(Error::EmptyValidationSet)));
    }

    #[test]
    fn empty_mask_zero_adapters_frozen_head_changes_nothing() {
        let data = tiny_task();
        let mut ck = base();
        adapter::attach(&mut ck.model, &mut ck.store, AdapterConfig::sequential(2), 0).unwrap();
        let before = ck.store.clone();
        let mut opt = AdamW::new(AdamWConfig::default());
        let (images, label) = data.train.batch(&[0, 1]);
        masked_step(&ck.model, &mut ck.store, &images, &label, &mut opt, 1e-3, &|_, _| true, 1).unwrap();
        assert!(ck.store.bit_eq(&before));
    }

    #[test]
    fn single_selected_scalar_sgd() {
        let data = tiny_task();
        let mut ck = base();
        let (images, label) = data.train.batch(&[0, 1]);
        let out = compute_gradients(&ck.model, &ck.store, &images, &label, &|_, _| true, 1).unwrap();
        let before = ck.store.clone();
        let name = "blocks.1.mlp.w1";
        let mut trainable = IndexMap::new();
        trainable.insert(name.to_string(), Some(vec![7]));
        sgd_step(&mut ck.store, &trainable, &out.grads, 0.5).unwrap();
        let g = out.grads[name].data()[7];
        assert_ne!(g, 0.0);
        let after = ck.store.tensor(name).unwrap().data();
        assert_eq!(after[7], before.tensor(name).unwrap().data()[7] - 0.5 * g);
        for (n, p) in ck.store.iter() {
            let b = before.tensor(n).unwrap();
            for (i, (x, y)) in p.tensor.data().iter().zip(b.data()).enumerate() {
                if !(n == name && i == 7) {
                    assert_eq!(x.to_bits(), y.to_bits(), "{n}[{i}]");
                }
            }
        }
    }

    #[test]
    fn sfa_run_respects_budget_and_freezes_the_rest() {
        let data = tiny_task();
        let b = base();
        let cfg = tiny_cfg();
        let run = run_sfa(&b, &data, &cfg).unwrap();
        let plan = BudgetPlan::new(cfg.beta, cfg.rho, b.store.backbone_count()).unwrap();
        assert_eq!(run.mask.len(), plan.internal_quota());
        assert!(run.report.counts.adapter + run.mask.len() <= plan.ceiling() as usize);
        // Optimizer state: adapters + head + mask only.
        for (name, p) in run.store.iter() {
            if !p.group.is_backbone() {
                continue;
            }
            let base_t = b.store.tensor(name).unwrap();
            for (i, (x, y)) in p.tensor.data().iter().zip(base_t.data()).enumerate() {
                if !run.mask.contains(name, i) {
                    assert_eq!(x.to_bits(), y.to_bits(), "{name}[{i}] moved");
                }
            }
        }
        let sum: usize = run.report.layers.iter().map(|l| l.att_selected + l.mlp_selected).sum();
        assert_eq!(sum, run.mask.len());
        assert_eq!(run.report.history.last().unwrap().step, cfg.steps);
    }

    #[test]
    fn determinism() {
        let data = tiny_task();
        let b = base();
        let a = run_sfa(&b, &data, &tiny_cfg()).unwrap();
        let c = run_sfa(&b, &data, &tiny_cfg()).unwrap();
        assert_eq!(a.mask, c.mask);
        assert!(a.store.bit_eq(&c.store));
    }

    #[test]
    fn baselines_count_trainables() {
        let data = tiny_task();
        let b = base();
        let cfg = TrainConfig { steps: 2, ..tiny_cfg() };
        let frozen = run_baseline(&b, &data, &cfg, Method::Frozen).unwrap();
        assert_eq!(frozen.report.counts.backbone_side(), 0);
        let full = run_baseline(&b, &data, &cfg, Method::FullFinetune).unwrap();
        assert_eq!(full.report.counts.total(), b.store.backbone_count() + b.store.count(Group::Head));
        let zero = TrainConfig { beta: 0.0, adapters: false, ..cfg.clone() };
        assert_eq!(run_sfa(&b, &data, &zero).unwrap().report.method, "frozen");
        let internal = run_baseline(&b, &data, &cfg, Method::InternalOnly).unwrap();
        let sfa = run_sfa(&b, &data, &cfg).unwrap();
        assert_eq!(internal.report.budget_ceiling, sfa.report.budget_ceiling);
        assert!(matches!(run_sfa(&b, &data, &TrainConfig { beta: 0.0, ..cfg }), Err(Error::InfeasibleBudget { .. })));
    }

    #[test]
    fn imported_mask_passes_through() {
        let data = tiny_task();
        let b = base();
        let cfg = tiny_cfg();
        let first = run_sfa(&b, &data, &cfg).unwrap();
        let second = adapt_with_mask(&b, &data, &TrainConfig { steps: 3, ..cfg }, &first.mask).unwrap();
        assert_eq!(second.mask, first.mask);
        let c = second.report.counts;
        assert_eq!(c.total(), first.mask.len() + c.adapter + c.head);
    }

    #[test]
    fn pretrain_zero_steps_is_initialization() {
        let data = tiny_task();
        let cfg = TrainConfig { steps: 0, seed: 1, ..tiny_cfg() };
        let (ck, _) = pretrain(tiny_backbone(), &data, &cfg).unwrap();
        let (_, init) = build(ck.model.config, 1).unwrap();
        assert!(ck.store.bit_eq(&init));
        let (moved, _) = pretrain(tiny_backbone(), &data, &TrainConfig { steps: 1, ..cfg.clone() }).unwrap();
        assert!(!moved.store.bit_eq(&init));
        assert!(cfg.validate().is_err());
    }
}
