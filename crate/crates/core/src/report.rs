//! Plot-ready CSV and JSON outputs for runs and sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::trainer::RunReport;

/// `layer,att_selected,att_pool,att_fraction,mlp_selected,mlp_pool,mlp_fraction`
pub fn layer_csv(report: &RunReport) -> String {
    let mut out = String::from("layer,att_selected,att_pool,att_fraction,mlp_selected,mlp_pool,mlp_fraction\n");
    for l in &report.layers {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{},{},{:.6}",
            l.layer,
            l.att_selected,
            l.att_pool,
            l.att_fraction(),
            l.mlp_selected,
            l.mlp_pool,
            l.mlp_fraction()
        );
    }
    out
}

/// `step,loss,metric,trainable_count`
pub fn history_csv(report: &RunReport) -> String {
    let mut out = String::from("step,loss,metric,trainable_count\n");
    for p in &report.history {
        let _ = writeln!(out, "{},{:.6},{:.6},{}", p.step, p.loss, p.metric, p.trainable_count);
    }
    out
}

/// One row per run, sorted by budget then method and seed.
pub fn budget_csv(reports: &[RunReport]) -> String {
    let mut rows: Vec<&RunReport> = reports.iter().collect();
    rows.sort_by(|a, b| a.beta.total_cmp(&b.beta).then_with(|| a.method.cmp(&b.method)).then(a.seed.cmp(&b.seed)));
    let mut out = String::from("beta,rho,method,seed,adapter_params,mask_params,head_params,backbone_params,metric_name,metric\n");
    for r in rows {
        let c = &r.counts;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{:.6}",
            r.beta, r.rho, r.method, r.seed, c.adapter, c.mask, c.head, c.backbone_total, r.metric, r.final_metric
        );
    }
    out
}

/// One row per run, sorted by selection period. Up-front runs carry `step_size = T`.
pub fn step_size_csv(reports: &[RunReport]) -> String {
    let mut rows: Vec<&RunReport> = reports.iter().collect();
    rows.sort_by(|a, b| a.step_size.cmp(&b.step_size).then(a.seed.cmp(&b.seed)));
    let mut out = String::from("step_size,rounds,seed,metric_name,metric\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{:.6}", r.step_size, r.selection_rounds, r.seed, r.metric, r.final_metric);
    }
    out
}

/// Writes `report.json`, `history.csv` and `layers.csv` for one run, plus
/// `budget.csv` and `step_size.csv` over all of `reports`. Returns the paths.
pub fn emit_reports(reports: &[RunReport], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    for (i, r) in reports.iter().enumerate() {
        let stem = if reports.len() == 1 { String::new() } else { format!("run{i:03}_") };
        put(format!("{stem}report.json"), serde_json::to_string_pretty(r)?)?;
        put(format!("{stem}history.csv"), history_csv(r))?;
        put(format!("{stem}layers.csv"), layer_csv(r))?;
    }
    if reports.len() > 1 {
        put("budget.csv".into(), budget_csv(reports))?;
        put("step_size.csv".into(), step_size_csv(reports))?;
    }
    Ok(written)
}
