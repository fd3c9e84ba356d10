//! Command-line surface: `sfa <subcommand> [flags]`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::checkpoint::Checkpoint;
use crate::delta::{apply_delta, export_delta, SparseDelta};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::report::emit_reports;
use crate::selection::{SelectionCriterion, SelectionMask};
use crate::tasks::TaskSpec;
use crate::trainer::{self, Adapted, Method, RunReport, ScheduleKind, TaskData, TrainConfig};

pub const MASK_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.sfa";
pub const DELTA_FILE: &str = "delta.sfad";
pub const MASK_FILE: &str = "mask.json";

#[derive(Debug, Parser)]
#[command(name = "sfa", version, about = "Budgeted adapter training on a toy dense-prediction transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a backbone from scratch on a source task and save it.
    Pretrain(Common),
    /// Adapt a checkpoint with external adapters plus selected backbone scalars.
    Adapt(AdaptArgs),
    /// Run a comparison method on the same footing as `adapt`.
    Baseline(BaselineArgs),
    /// Train adapters and head with a mask selected on another task.
    TransferMask(TransferArgs),
    /// Evaluate a checkpoint (optionally with a delta applied) on a task.
    Eval(EvalArgs),
    /// Repeat `adapt` over a grid of one setting.
    Sweep(SweepArgs),
    /// Gradient checks and a quick invariant suite.
    Selftest(SelftestArgs),
    /// Rebuild CSV summaries from saved run reports.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON file with optional `backbone` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Selection period; `0` selects everything after the first step.
    #[arg(long)]
    pub step_size: Option<usize>,
    /// gradient | random | magnitude | layer-wise
    #[arg(long)]
    pub criterion: Option<String>,
    /// source-seg | target-seg | transfer-seg | target-depth
    #[arg(long)]
    pub task: Option<String>,
    /// Seed of the task generator (defaults to 1 for source tasks, 2 otherwise).
    #[arg(long)]
    pub task_seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub common: Common,
    /// Base checkpoint produced by `pretrain`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Attach no external adapters.
    #[arg(long)]
    pub no_adapters: bool,
    /// Also write the full adapted checkpoint.
    #[arg(long)]
    pub save_checkpoint: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BaselineKind {
    Frozen,
    FullFinetune,
    ExternalOnly,
    InternalOnly,
    AdaptformerStyle,
}

impl From<BaselineKind> for Method {
    fn from(k: BaselineKind) -> Self {
        match k {
            BaselineKind::Frozen => Method::Frozen,
            BaselineKind::FullFinetune => Method::FullFinetune,
            BaselineKind::ExternalOnly => Method::ExternalOnly,
            BaselineKind::InternalOnly => Method::InternalOnly,
            BaselineKind::AdaptformerStyle => Method::AdaptformerStyle,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub kind: BaselineKind,
}

#[derive(Debug, Clone, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `mask.json` or a delta file from an earlier `adapt`.
    #[arg(long)]
    pub mask: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub delta: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SweepKind {
    Budget,
    Dim,
    StepSize,
    Criterion,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(value_enum)]
    pub kind: SweepKind,
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated grid overriding the default for the sweep kind.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 20)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Report JSON files or directories containing `*report.json`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub backbone: Option<BackboneConfig>,
    pub train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    format_version: u32,
    mask: SelectionMask,
}

pub fn save_mask(mask: &SelectionMask, path: &Path) -> Result<()> {
    let file = MaskFile { format_version: MASK_FORMAT_VERSION, mask: mask.clone() };
    fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

/// Reads a mask from `mask.json` or from a sparse delta.
pub fn load_mask(path: &Path) -> Result<SelectionMask> {
    let bytes = fs::read(path)?;
    if bytes.first() == Some(&b'{') {
        let file: MaskFile = serde_json::from_slice(&bytes)?;
        if file.format_version != MASK_FORMAT_VERSION {
            return Err(Error::FormatVersion { found: file.format_version, expected: MASK_FORMAT_VERSION });
        }
        Ok(file.mask)
    } else {
        SparseDelta::from_bytes(&bytes)?.mask()
    }
}

struct Resolved {
    backbone: BackboneConfig,
    train: TrainConfig,
    task: TaskSpec,
    out: PathBuf,
}

fn resolve(common: &Common, default_task: &str, default_out: &str) -> Result<Resolved> {
    let file: FileConfig = match &common.config {
        Some(p) => serde_json::from_slice(&fs::read(p)?)?,
        None => FileConfig::default(),
    };
    let mut train = file.train;
    if let Some(v) = common.seed {
        train.seed = v;
    }
    if let Some(v) = common.beta {
        train.beta = v;
    }
    if let Some(v) = common.rho {
        train.rho = v;
    }
    match common.step_size {
        Some(0) => train.schedule = ScheduleKind::UpFront,
        Some(s) => {
            train.schedule = ScheduleKind::Periodic;
            train.step_size = Some(s);
        }
        None => {}
    }
    if let Some(c) = &common.criterion {
        train.criterion = c.parse()?;
    }
    if let Some(v) = common.steps {
        train.steps = v;
    }
    if let Some(v) = common.batch_size {
        train.batch_size = v;
    }
    let task_name = common.task.as_deref().unwrap_or(default_task);
    let task_seed = common.task_seed.unwrap_or(if task_name.starts_with("source") { 1 } else { 2 });
    let task = TaskSpec::preset(task_name, task_seed)?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(default_out));
    Ok(Resolved { backbone: file.backbone.unwrap_or_default(), train, task, out })
}

fn write_adapted(run: &Adapted, base: &Checkpoint, out: &Path, full: bool) -> Result<()> {
    fs::create_dir_all(out)?;
    emit_reports(std::slice::from_ref(&run.report), out)?;
    save_mask(&run.mask, &out.join(MASK_FILE))?;
    if run.report.method != Method::FullFinetune.as_str() {
        export_delta(&run.model, &run.store, &run.mask, base)?.save(&out.join(DELTA_FILE))?;
    }
    if full {
        run.checkpoint().save(&out.join(CHECKPOINT_FILE))?;
    }
    Ok(())
}

fn summary(r: &RunReport) -> String {
    format!(
        "{} on {}: {} = {:.4} (adapter {}, mask {}, head {}, seed {})",
        r.method, r.task, r.metric, r.final_metric, r.counts.adapter, r.counts.mask, r.counts.head, r.seed
    )
}

fn collect_reports(inputs: &[PathBuf]) -> Result<Vec<RunReport>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("report.json")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    files.iter().map(|f| Ok(serde_json::from_slice(&fs::read(f)?)?)).collect()
}

const BUDGET_GRID: [&str; 6] = ["0.01", "0.02", "0.05", "0.10", "0.15", "0.20"];
const DIM_GRID: [&str; 5] = ["1", "2", "4", "8", "16"];
const STEP_GRID: [&str; 5] = ["0", "50", "100", "200", "400"];
const CRITERION_GRID: [&str; 4] = ["gradient", "random", "magnitude", "layer-wise"];

fn parse<T: std::str::FromStr>(v: &str, what: &str) -> Result<T> {
    v.parse().map_err(|_| Error::InvalidConfig(format!("bad {what} `{v}`")))
}

fn sweep(args: &SweepArgs) -> Result<Vec<RunReport>> {
    let r = resolve(&args.common, "target-seg", "runs/sweep")?;
    let base = Checkpoint::load(&args.checkpoint)?;
    let data = TaskData::generate(&r.task)?;
    let defaults: &[&str] = match args.kind {
        SweepKind::Budget => &BUDGET_GRID,
        SweepKind::Dim => &DIM_GRID,
        SweepKind::StepSize => &STEP_GRID,
        SweepKind::Criterion => &CRITERION_GRID,
    };
    let values: Vec<String> =
        if args.values.is_empty() { defaults.iter().map(|s| s.to_string()).collect() } else { args.values.clone() };
    let mut reports = Vec::new();
    for v in &values {
        let mut cfg = r.train.clone();
        let mut method = Method::Sfa;
        match args.kind {
            SweepKind::Budget => cfg.beta = parse(v, "beta")?,
            SweepKind::Dim => {
                // Adapters alone, unconstrained by the budget.
                method = Method::ExternalOnly;
                cfg.adapter_dim = Some(parse(v, "adapter dimension")?);
                cfg.beta = 1.0;
            }
            SweepKind::StepSize => match parse::<usize>(v, "step size")? {
                0 => cfg.schedule = ScheduleKind::UpFront,
                s => {
                    cfg.schedule = ScheduleKind::Periodic;
                    cfg.step_size = Some(s);
                }
            },
            SweepKind::Criterion => cfg.criterion = v.parse::<SelectionCriterion>()?,
        }
        let run = match trainer::adapt(&base, &data, &cfg, method, None) {
            // Small budgets cannot host a d = 1 adapter at every site; the
            // whole budget then goes to selection.
            Err(Error::InfeasibleBudget { .. }) if matches!(args.kind, SweepKind::Budget) => {
                let cfg = TrainConfig { adapters: false, rho: 0.0, ..cfg };
                trainer::adapt(&base, &data, &cfg, method, None)?
            }
            other => other?,
        };
        println!("{v}: {}", summary(&run.report));
        write_adapted(&run, &base, &r.out.join(format!("{}_{v}", sweep_name(args.kind))), false)?;
        reports.push(run.report);
    }
    emit_reports(&reports, &r.out)?;
    Ok(reports)
}

fn sweep_name(kind: SweepKind) -> &'static str {
    match kind {
        SweepKind::Budget => "beta",
        SweepKind::Dim => "dim",
        SweepKind::StepSize => "step",
        SweepKind::Criterion => "criterion",
    }
}

fn selftest(args: &SelftestArgs) -> Result<bool> {
    let mut ok = true;
    println!("{:<22} {:>6} {:>14}  status", "op", "draws", "max_rel_error");
    for c in gradcheck::check_all(args.draws, args.seed)? {
        ok &= c.passed();
        println!("{:<22} {:>6} {:>14.3e}  {}", c.op, c.draws, c.max_rel_error, if c.passed() { "ok" } else { "FAIL" });
    }
    for (name, passed) in crate::invariants::quick_suite(args.seed)? {
        ok &= passed;
        println!("{name:<37}  {}", if passed { "ok" } else { "FAIL" });
    }
    Ok(ok)
}

/// Runs a parsed command. `Ok(false)` means a check failed.
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Pretrain(c) => {
            let r = resolve(&c, "source-seg", "runs/pretrain")?;
            let data = TaskData::generate(&r.task)?;
            let (ck, rep) = trainer::pretrain(r.backbone, &data, &r.train)?;
            fs::create_dir_all(&r.out)?;
            ck.save(&r.out.join(CHECKPOINT_FILE))?;
            fs::write(r.out.join("pretrain.json"), serde_json::to_vec_pretty(&rep)?)?;
            println!(
                "pretrained on {} for {} steps: miou {:.4} -> {:.4}; wrote {}",
                rep.task,
                rep.steps,
                rep.initial_metric,
                rep.final_metric,
                r.out.join(CHECKPOINT_FILE).display()
            );
        }
        Command::Adapt(a) => {
            let r = resolve(&a.common, "target-seg", "runs/adapt")?;
            let base = Checkpoint::load(&a.checkpoint)?;
            let data = TaskData::generate(&r.task)?;
            let cfg = TrainConfig { adapters: !a.no_adapters, ..r.train };
            let run = trainer::run_sfa(&base, &data, &cfg)?;
            write_adapted(&run, &base, &r.out, a.save_checkpoint)?;
            println!("{}", summary(&run.report));
        }
        Command::Baseline(b) => {
            let r = resolve(&b.common, "target-seg", "runs/baseline")?;
            let base = Checkpoint::load(&b.checkpoint)?;
            let data = TaskData::generate(&r.task)?;
            let run = trainer::run_baseline(&base, &data, &r.train, b.kind.into())?;
            write_adapted(&run, &base, &r.out, false)?;
            println!("{}", summary(&run.report));
        }
        Command::TransferMask(t) => {
            let r = resolve(&t.common, "transfer-seg", "runs/transfer")?;
            let base = Checkpoint::load(&t.checkpoint)?;
            let mask = load_mask(&t.mask)?;
            let data = TaskData::generate(&r.task)?;
            let run = trainer::adapt_with_mask(&base, &data, &r.train, &mask)?;
            write_adapted(&run, &base, &r.out, false)?;
            println!("{}", summary(&run.report));
        }
        Command::Eval(e) => {
            let r = resolve(&e.common, "target-seg", "runs/eval")?;
            let mut ck = Checkpoint::load(&e.checkpoint)?;
            if let Some(d) = &e.delta {
                ck = apply_delta(&ck, &SparseDelta::load(d)?)?;
            }
            let data = TaskData::generate(&r.task)?;
            if trainer::head_kind(&r.task) != ck.model.config.head {
                return Err(Error::InvalidConfig(format!("checkpoint head does not fit task `{}`", r.task.name)));
            }
            let m = trainer::evaluate(&ck.model, &ck.store, &data.val, r.train.eval_batch)?;
            println!("{}", serde_json::json!({ "task": r.task.name, m.name(): m.value() }));
        }
        Command::Sweep(s) => {
            sweep(&s)?;
        }
        Command::Selftest(s) => return selftest(&s),
        Command::Report(r) => {
            let reports = collect_reports(&r.inputs)?;
            if reports.is_empty() {
                return Err(Error::InvalidConfig("no reports found".into()));
            }
            for p in emit_reports(&reports, &r.out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(true)
}
