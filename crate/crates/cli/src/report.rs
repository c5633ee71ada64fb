//! Text summaries of run and ablation directories.

use std::collections::BTreeMap;
use std::path::Path;

use camlmlab::config::LabConfig;
use camlmlab::eval::AblationGrid;
use camlmlab::trainer::{latest_checkpoint, mean_step_ms, read_metrics, MetricRecord, RunPaths};
use camlmlab::{Error, Result};

pub const GRID_JSONL: &str = "grid.jsonl";
pub const GRID_TEXT: &str = "grid.txt";
pub const SUMMARY: &str = "summary.txt";

fn missing(what: String) -> Error {
    Error::io(what, std::io::Error::from(std::io::ErrorKind::NotFound))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Renders the summary, writes it under the directory and returns it.
pub fn render(dir: &Path) -> Result<String> {
    if !dir.is_dir() {
        return Err(missing(format!("run directory {}", dir.display())));
    }
    let grid = dir.join(GRID_JSONL);
    let (text, dest) = if grid.is_file() {
        (ablation_summary(&grid)?, dir.join(SUMMARY))
    } else {
        let run = RunPaths::new(dir);
        (run_summary(&run)?, run.reports().join(SUMMARY))
    };
    if let Some(parent) = dest.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    std::fs::write(&dest, &text)
        .map_err(|e| Error::io(format!("writing {}", dest.display()), e))?;
    Ok(text)
}

fn ablation_summary(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let grid = AblationGrid::from_jsonl(&text, &path.display().to_string())?;
    if grid.rows.is_empty() {
        return Err(missing(format!("ablation rows in {}", path.display())));
    }
    Ok(grid.to_text())
}

fn run_summary(run: &RunPaths) -> Result<String> {
    let metrics = run.metrics();
    if !metrics.is_file() {
        return Err(missing(format!("metrics log {}", metrics.display())));
    }
    let records = read_metrics(&metrics)?;
    let Some(last) = records.last() else {
        return Err(missing(format!("records in {}", metrics.display())));
    };
    let config = LabConfig::load(&run.config_echo()).ok();
    let total = config.as_ref().map(|c| c.train.total_steps);

    let mut out = format!("run        {}\n", run.root.display());
    match total {
        Some(t) => out.push_str(&format!("steps      {} / {t}\n", last.step)),
        None => out.push_str(&format!("steps      {}\n", last.step)),
    }
    out.push_str(&format!(
        "tokens     {}\n",
        records.iter().map(|r| r.tokens).sum::<usize>()
    ));
    out.push_str(&format!("step time  {:.2} ms\n", mean_step_ms(&records)));
    out.push_str(&format!("final lr   {:.3e}\n", last.lr));
    if let Some((step, path)) = latest_checkpoint(run)? {
        out.push_str(&format!("checkpoint {} (step {step})\n", path.display()));
    }

    out.push_str("\nobjective  steps  first-10% loss  last-10% loss\n");
    for (name, losses) in per_objective(&records) {
        let k = (losses.len() / 10).max(1);
        out.push_str(&format!(
            "{name:<9}  {:>5}  {:>14.4}  {:>13.4}\n",
            losses.len(),
            mean(&losses[..k]),
            mean(&losses[losses.len() - k..])
        ));
    }
    Ok(out)
}

fn per_objective(records: &[MetricRecord]) -> BTreeMap<&'static str, Vec<f64>> {
    let mut by: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for r in records {
        match r.objective {
            Some(k) => by.entry(k.as_str()).or_default().push(r.loss),
            None => {
                for (k, l) in &r.components {
                    by.entry(k.as_str()).or_default().push(*l);
                }
                by.entry("total").or_default().push(r.loss);
            }
        }
    }
    by
}
