//! Side-by-side summary of finished run directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::config::{ExperimentConfig, ScheduleConfig};
use crate::diagnostics::parse_metrics_csv;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub variant: String,
    pub final_acc: f64,
    pub best_acc: f64,
    pub best_round: usize,
    /// Differences from the first run of the comparison.
    pub delta_final: f64,
    pub delta_best: f64,
}

#[derive(Deserialize)]
struct ManifestHead {
    run: RunHead,
}

#[derive(Deserialize)]
struct RunHead {
    status: String,
    variant: String,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load(dir: &Path) -> Result<(ScheduleConfig, RunSummary)> {
    let manifest_text = read(&dir.join("manifest.toml"))?;
    let head: ManifestHead = toml::from_str(&manifest_text)
        .map_err(|e| Error::Compare(format!("{}: bad manifest: {}", dir.display(), e.message())))?;
    if head.run.status != "complete" {
        return Err(Error::Compare(format!("{}: run is {}", dir.display(), head.run.status)));
    }
    let config = ExperimentConfig::parse(&manifest_text)?;
    let metrics = parse_metrics_csv(&read(&dir.join("metrics.csv"))?)
        .map_err(|e| Error::Compare(format!("{}/metrics.csv: {e}", dir.display())))?;
    let last = metrics
        .last()
        .ok_or_else(|| Error::Compare(format!("{}: no metrics rows", dir.display())))?;
    // First maximum wins, so the reported round is the earliest best.
    let best = metrics
        .iter()
        .fold(last, |b, r| if r.global_acc > b.global_acc || (r.global_acc == b.global_acc && r.round < b.round) { r } else { b });
    Ok((
        config.schedule,
        RunSummary {
            dir: dir.to_path_buf(),
            variant: head.run.variant,
            final_acc: last.global_acc,
            best_acc: best.global_acc,
            best_round: best.round,
            delta_final: 0.0,
            delta_best: 0.0,
        },
    ))
}

/// Final and best global accuracy of every run, with differences from the
/// first. Runs must be complete and share a schedule (seed excepted).
pub fn compare_runs(dirs: &[PathBuf]) -> Result<Vec<RunSummary>> {
    if dirs.len() < 2 {
        return Err(Error::Compare("need at least two run directories".into()));
    }
    let loaded = dirs.iter().map(|d| load(d)).collect::<Result<Vec<_>>>()?;
    let key = |s: &ScheduleConfig| ScheduleConfig { seed: 0, ..s.clone() };
    let reference = key(&loaded[0].0);
    if let Some((_, run)) = loaded.iter().find(|(s, _)| key(s) != reference) {
        return Err(Error::Compare(format!(
            "{} was run with a different schedule than {}",
            run.dir.display(),
            loaded[0].1.dir.display()
        )));
    }
    let (first_final, first_best) = (loaded[0].1.final_acc, loaded[0].1.best_acc);
    Ok(loaded
        .into_iter()
        .map(|(_, mut run)| {
            run.delta_final = run.final_acc - first_final;
            run.delta_best = run.best_acc - first_best;
            run
        })
        .collect())
}

/// Plain-text table, accuracies in percent.
pub fn render_table(runs: &[RunSummary]) -> String {
    let width = runs.iter().map(|r| r.dir.display().to_string().len()).max().unwrap_or(3).max(3);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:<15}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}",
        "run", "variant", "final", "d_final", "best", "round", "d_best"
    );
    for r in runs {
        let _ = writeln!(
            out,
            "{:<width$}  {:<15}  {:>8.2}  {:>+8.2}  {:>8.2}  {:>8}  {:>+8.2}",
            r.dir.display(),
            r.variant,
            100.0 * r.final_acc,
            100.0 * r.delta_final,
            100.0 * r.best_acc,
            r.best_round,
            100.0 * r.delta_best
        );
    }
    out
}
