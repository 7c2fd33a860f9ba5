//! Run reports and their on-disk emission: one JSON artifact plus flat CSV
//! tables with a fixed column order and `{:.6}` float formatting, so
//! identical runs produce byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use subpop_core::metrics::{worst_k_summary, DamageReport};
use subpop_core::theory::TheoryReport;

use crate::config::ExperimentConfig;
use crate::CliError;

/// One damage measurement, tagged with the trial that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialDamage {
    pub trial: usize,
    #[serde(flatten)]
    pub report: DamageReport,
}

/// Mean damage over the worst-k subpopulations at one poison rate,
/// averaged across trials.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorstKRow {
    pub alpha: f64,
    /// Trials that contributed rows at this rate.
    pub trials: usize,
    pub k: usize,
    pub mean_target_damage: f64,
    pub mean_collateral_damage: f64,
    pub mean_subpop_test_count: f64,
}

/// One defense evaluated against one poisoned training set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseRow {
    pub trial: usize,
    pub subpop: String,
    pub alpha: f64,
    pub defense: String,
    pub found_fraction: f64,
    pub removed_fraction: f64,
    pub target_before: f64,
    pub target_after: f64,
    pub collateral_after: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Worst-k target damage when clustering at one representation layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSweepRow {
    pub layer: usize,
    pub alpha: f64,
    pub k: usize,
    pub mean_target_damage: f64,
}

/// A (subpopulation, trial) cell that could not be measured.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedCell {
    pub trial: usize,
    pub subpop: String,
    pub reason: String,
}

/// Everything one pipeline run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub trials: usize,
    /// Echo of the driving configuration, so every number in the report is
    /// reproducible from this file alone.
    pub config: ExperimentConfig,
    /// Subpopulation the pick strategy favored in the first trial.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub picked_subpop: Option<String>,
    pub damages: Vec<TrialDamage>,
    pub worst_k: Vec<WorstKRow>,
    pub defense: Vec<DefenseRow>,
    pub layer_sweep: Vec<LayerSweepRow>,
    pub skipped: Vec<SkippedCell>,
    /// Measured, not serialized: keeps identical runs byte-identical on disk.
    #[serde(skip)]
    pub wall_clock: Duration,
}

/// Per-alpha worst-k rows from per-trial damage tables.
///
/// Within each trial the reports at one rate are ranked by target damage and
/// the top `min(5, rows)` averaged; those per-trial summaries are then
/// averaged across trials. `k` is held to the smallest per-trial row count
/// so every trial contributes the same number of subpopulations.
pub fn aggregate_worst_k(
    damages: &[TrialDamage],
    alphas: &[f64],
    trials: usize,
) -> Result<Vec<WorstKRow>, CliError> {
    let mut rows = Vec::new();
    for &alpha in alphas {
        let mut per_trial: Vec<Vec<DamageReport>> = Vec::new();
        for t in 0..trials {
            let group: Vec<DamageReport> = damages
                .iter()
                .filter(|d| d.trial == t && d.report.alpha == alpha)
                .map(|d| d.report.clone())
                .collect();
            if !group.is_empty() {
                per_trial.push(group);
            }
        }
        if per_trial.is_empty() {
            continue;
        }
        let k = per_trial
            .iter()
            .map(|g| g.len())
            .min()
            .expect("non-empty")
            .min(5);
        let mut target = 0.0;
        let mut collateral = 0.0;
        let mut count = 0.0;
        for group in &per_trial {
            let s = worst_k_summary(group, k)?;
            target += s.mean_target_damage;
            collateral += s.mean_collateral_damage;
            count += s.mean_subpop_test_count;
        }
        let n = per_trial.len() as f64;
        rows.push(WorstKRow {
            alpha,
            trials: per_trial.len(),
            k,
            mean_target_damage: target / n,
            mean_collateral_damage: collateral / n,
            mean_subpop_test_count: count / n,
        });
    }
    Ok(rows)
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes `report.json` plus one CSV per populated table into `dir`,
/// returning the paths written.
pub fn emit_reports(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let json_path = dir.join("report.json");
    fs::write(&json_path, serde_json::to_string_pretty(report)?)?;
    written.push(json_path);

    let damage_path = dir.join("damage.csv");
    let rows: Vec<Vec<String>> = report
        .damages
        .iter()
        .map(|d| {
            vec![
                d.trial.to_string(),
                d.report.subpop.clone(),
                f(d.report.alpha),
                d.report.poison_count.to_string(),
                d.report.subpop_test_count.to_string(),
                d.report.other_test_count.to_string(),
                f(d.report.target_damage),
                f(d.report.collateral_damage),
                f(d.report.clean_acc),
                f(d.report.poisoned_acc),
            ]
        })
        .collect();
    write_csv(
        &damage_path,
        &[
            "trial",
            "subpop",
            "alpha",
            "poison_count",
            "subpop_test_count",
            "other_test_count",
            "target_damage",
            "collateral_damage",
            "clean_acc",
            "poisoned_acc",
        ],
        &rows,
    )?;
    written.push(damage_path);

    let worstk_path = dir.join("worstk.csv");
    let rows: Vec<Vec<String>> = report
        .worst_k
        .iter()
        .map(|w| {
            vec![
                f(w.alpha),
                w.trials.to_string(),
                w.k.to_string(),
                f(w.mean_target_damage),
                f(w.mean_collateral_damage),
                f(w.mean_subpop_test_count),
            ]
        })
        .collect();
    write_csv(
        &worstk_path,
        &[
            "alpha",
            "trials",
            "k",
            "mean_target_damage",
            "mean_collateral_damage",
            "mean_subpop_test_count",
        ],
        &rows,
    )?;
    written.push(worstk_path);

    if !report.defense.is_empty() {
        let defense_path = dir.join("defense.csv");
        let rows: Vec<Vec<String>> = report
            .defense
            .iter()
            .map(|d| {
                vec![
                    d.trial.to_string(),
                    d.subpop.clone(),
                    f(d.alpha),
                    d.defense.clone(),
                    f(d.found_fraction),
                    f(d.removed_fraction),
                    f(d.target_before),
                    f(d.target_after),
                    f(d.collateral_after),
                    d.warning.clone().unwrap_or_default(),
                ]
            })
            .collect();
        write_csv(
            &defense_path,
            &[
                "trial",
                "subpop",
                "alpha",
                "defense",
                "found_fraction",
                "removed_fraction",
                "target_before",
                "target_after",
                "collateral_after",
                "warning",
            ],
            &rows,
        )?;
        written.push(defense_path);
    }

    if !report.layer_sweep.is_empty() {
        let sweep_path = dir.join("layersweep.csv");
        let rows: Vec<Vec<String>> = report
            .layer_sweep
            .iter()
            .map(|l| {
                vec![
                    l.layer.to_string(),
                    f(l.alpha),
                    l.k.to_string(),
                    f(l.mean_target_damage),
                ]
            })
            .collect();
        write_csv(
            &sweep_path,
            &["layer", "alpha", "k", "mean_target_damage"],
            &rows,
        )?;
        written.push(sweep_path);
    }

    if !report.skipped.is_empty() {
        let skipped_path = dir.join("skipped.csv");
        let rows: Vec<Vec<String>> = report
            .skipped
            .iter()
            .map(|s| vec![s.trial.to_string(), s.subpop.clone(), s.reason.clone()])
            .collect();
        write_csv(&skipped_path, &["trial", "subpop", "reason"], &rows)?;
        written.push(skipped_path);
    }

    Ok(written)
}

/// Loads a `report.json` back; the inverse of [`emit_reports`]'s JSON leg.
pub fn load_report(path: impl AsRef<Path>) -> Result<RunReport, CliError> {
    let text = fs::read_to_string(path.as_ref())?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes a theory report as pretty JSON.
pub fn emit_theory_json(report: &TheoryReport, path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// Summary of the 2-d defense-failure scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fig2Report {
    pub seed: u64,
    /// Clean-model error on the targeted subpopulation's test points.
    pub clean_subpop_error: f64,
    /// Damage of the undefended poisoned model.
    pub damage: DamageReport,
    /// Target damage after the loss-trimming defense.
    pub trim_target_damage: f64,
    pub trim_collateral_damage: f64,
    /// Fraction of actual poisons among the points the defense removed.
    pub trim_found_fraction: f64,
    pub removed_total: usize,
    /// Genuine targeted-subpopulation training points the defense removed.
    pub removed_genuine_subpop: usize,
    pub genuine_subpop_train_count: usize,
}

/// One point of the 2-d decision grid: predicted class per model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub x: f64,
    pub y: f64,
    pub clean: usize,
    pub poisoned: usize,
    pub trimmed: usize,
}

/// Writes the decision grid as plot-ready CSV.
pub fn emit_grid_csv(rows: &[GridRow], path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                f(r.x),
                f(r.y),
                r.clean.to_string(),
                r.poisoned.to_string(),
                r.trimmed.to_string(),
            ]
        })
        .collect();
    write_csv(path, &["x", "y", "clean", "poisoned", "trimmed"], &table)?;
    Ok(())
}
