//! Run artefacts: JSON reports, flat metric CSVs and merged summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mtlaug_core::eval::{AblationRow, ExperimentReport};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Everything one command produced, as written to `report.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub wall_clock_s: f64,
    pub reports: Vec<ExperimentReport>,
    #[serde(default)]
    pub ablation: Vec<AblationRow>,
}

pub const METRICS_HEADER: &str = "protocol,arm,repeat,fold,uar,config_hash,seed";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

/// Flat `protocol,arm,repeat,fold,uar` table with hash and seed columns.
pub fn metrics_csv(run: &RunReport) -> String {
    let mut s = format!("{}\n", METRICS_HEADER);
    let all = run
        .reports
        .iter()
        .chain(run.ablation.iter().flat_map(|r| [&r.within, &r.cross]));
    for rep in all {
        for row in rep.csv_rows() {
            let _ = writeln!(s, "{},{},{}", row, run.config_hash, run.seed);
        }
    }
    s
}

/// Per-report means, one line each.
pub fn summary_csv(runs: &[RunReport]) -> String {
    let mut s = String::from("command,protocol,arm,direction,n_repeats,mean_uar,std_uar,config_hash,seed\n");
    for run in runs {
        let all = run
            .reports
            .iter()
            .chain(run.ablation.iter().flat_map(|r| [&r.within, &r.cross]));
        for r in all {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                run.command,
                r.protocol,
                r.arm,
                r.direction.as_deref().unwrap_or(""),
                r.repeats.len(),
                r.mean_uar,
                r.std_uar,
                run.config_hash,
                run.seed
            );
        }
    }
    s
}

fn pct(mean: f64, std: f64) -> String {
    format!("{:.1} ± {:.1}", 100.0 * mean, 100.0 * std)
}

fn mark(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

pub fn ablation_csv(rows: &[AblationRow], hash: &str, seed: u64) -> String {
    let mut s = String::from("model,augtype,reconstruction,center_loss,attention,within_mean,within_std,cross_mean,cross_std,config_hash,seed\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.model,
            r.augtype,
            r.reconstruction,
            r.center_loss,
            r.attention,
            r.within.mean_uar,
            r.within.std_uar,
            r.cross.mean_uar,
            r.cross.std_uar,
            hash,
            seed
        );
    }
    s
}

/// Markdown tables grouped by command.
pub fn tables_markdown(runs: &[RunReport]) -> String {
    let mut s = String::new();
    for run in runs {
        let _ = writeln!(s, "## {} (config {}, seed {})\n", run.command, run.config_hash, run.seed);
        if !run.ablation.is_empty() {
            s.push_str("| Model | Aug-type | Reconstruction | Centre loss | Attention | Within UAR (%) | Cross UAR (%) |\n");
            s.push_str("|---|---|---|---|---|---|---|\n");
            for r in &run.ablation {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {} | {} | {} |",
                    r.model,
                    mark(r.augtype),
                    mark(r.reconstruction),
                    mark(r.center_loss),
                    mark(r.attention),
                    pct(r.within.mean_uar, r.within.std_uar),
                    pct(r.cross.mean_uar, r.cross.std_uar)
                );
            }
            s.push('\n');
        }
        if !run.reports.is_empty() {
            s.push_str("| Protocol | Arm | Direction | UAR (%) |\n|---|---|---|---|\n");
            for r in &run.reports {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} |",
                    r.protocol,
                    r.arm,
                    r.direction.as_deref().unwrap_or("-"),
                    pct(r.mean_uar, r.std_uar)
                );
            }
            s.push('\n');
        }
    }
    s
}

/// Plot-ready `x,mean_uar,std_uar` rows, `x` taken from each arm name.
pub fn curve_csv(x_name: &str, reports: &[ExperimentReport]) -> String {
    let mut s = format!("{},mean_uar,std_uar\n", x_name);
    for r in reports {
        let _ = writeln!(s, "{},{},{}", r.arm, r.mean_uar, r.std_uar);
    }
    s
}

/// Writes `report.json` and `metrics.csv` into `dir`.
pub fn write_run(dir: &Path, run: &RunReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    write(&dir.join("report.json"), &serde_json::to_string_pretty(run)?)?;
    write(&dir.join("metrics.csv"), &metrics_csv(run))?;
    if !run.ablation.is_empty() {
        write(&dir.join("table7.csv"), &ablation_csv(&run.ablation, &run.config_hash, run.seed))?;
    }
    Ok(())
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let p = dir.join(name);
    write(&p, text)?;
    Ok(p)
}

/// Every `*/report.json` directly below `dir`, sorted by command.
pub fn collect_runs(dir: &Path) -> Result<Vec<RunReport>> {
    let mut runs = Vec::new();
    if !dir.exists() {
        return Ok(runs);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path().join("report.json")))
        .filter(|p| p.exists())
        .collect();
    entries.sort();
    for p in entries {
        let text = fs::read_to_string(&p).map_err(Error::io(&p))?;
        runs.push(serde_json::from_str(&text)?);
    }
    Ok(runs)
}
