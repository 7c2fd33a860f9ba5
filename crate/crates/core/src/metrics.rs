//! Damage accounting on held-out test data.
//!
//! All comparisons are between a clean model and a poisoned model on the
//! same test split: target damage is the error increase on the filtered
//! subpopulation, collateral damage the error increase on everything else.
//! Positive values mean the poisoning hurt; negative values mean it
//! (accidentally) helped.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{self, ModelParams};
use crate::select::FilterFunction;

/// Damage bookkeeping for one attacked subpopulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DamageReport {
    /// Display name of the attacked filter.
    pub subpop: String,
    /// Poison rate the attack was sized with.
    pub alpha: f64,
    /// Number of poison points injected.
    pub poison_count: usize,
    /// Error increase on test points the filter matches.
    pub target_damage: f64,
    /// Error increase on the complement.
    pub collateral_damage: f64,
    /// Matched test points.
    pub subpop_test_count: usize,
    /// Unmatched test points.
    pub other_test_count: usize,
    /// Whole-test accuracy of the clean model.
    pub clean_acc: f64,
    /// Whole-test accuracy of the poisoned model.
    pub poisoned_acc: f64,
}

/// Error increase of `poisoned` over `clean` on the test points the filter
/// matches: `mean(err_poisoned − err_clean | F = 1)`.
pub fn target_damage(
    clean: &ModelParams,
    poisoned: &ModelParams,
    test: &Dataset,
    filter: &FilterFunction,
) -> Result<f64> {
    let (target, _) = split_errors(clean, poisoned, test, filter)?;
    let (diff, count) = target;
    if count == 0 {
        return Err(Error::EmptySubpopulation(format!(
            "{} matches no test points",
            filter.describe()
        )));
    }
    Ok(diff / count as f64)
}

/// Error increase on the complement: `mean(err_poisoned − err_clean | F = 0)`.
pub fn collateral_damage(
    clean: &ModelParams,
    poisoned: &ModelParams,
    test: &Dataset,
    filter: &FilterFunction,
) -> Result<f64> {
    let (_, other) = split_errors(clean, poisoned, test, filter)?;
    let (diff, count) = other;
    if count == 0 {
        return Err(Error::EmptySubpopulation(format!(
            "{} matches every test point, complement is empty",
            filter.describe()
        )));
    }
    Ok(diff / count as f64)
}

/// Builds a full [`DamageReport`] in one pass over the test set.
pub fn damage_report(
    clean: &ModelParams,
    poisoned: &ModelParams,
    test: &Dataset,
    filter: &FilterFunction,
    alpha: f64,
    poison_count: usize,
) -> Result<DamageReport> {
    let (target, other) = split_errors(clean, poisoned, test, filter)?;
    let (t_diff, t_count) = target;
    let (o_diff, o_count) = other;
    if t_count == 0 {
        return Err(Error::EmptySubpopulation(format!(
            "{} matches no test points",
            filter.describe()
        )));
    }
    if o_count == 0 {
        return Err(Error::EmptySubpopulation(format!(
            "{} matches every test point, complement is empty",
            filter.describe()
        )));
    }
    Ok(DamageReport {
        subpop: filter.describe(),
        alpha,
        poison_count,
        target_damage: t_diff / t_count as f64,
        collateral_damage: o_diff / o_count as f64,
        subpop_test_count: t_count,
        other_test_count: o_count,
        clean_acc: models::accuracy(clean, test)?,
        poisoned_acc: models::accuracy(poisoned, test)?,
    })
}

/// Summed indicator-error differences and counts for (matched, unmatched)
/// test points.
fn split_errors(
    clean: &ModelParams,
    poisoned: &ModelParams,
    test: &Dataset,
    filter: &FilterFunction,
) -> Result<((f64, usize), (f64, usize))> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let mut t = (0.0, 0usize);
    let mut o = (0.0, 0usize);
    for p in &test.points {
        let err_clean = (models::predict(clean, &p.features) != p.label) as u8 as f64;
        let err_pois = (models::predict(poisoned, &p.features) != p.label) as u8 as f64;
        let diff = err_pois - err_clean;
        if filter.matches(p)? {
            t.0 += diff;
            t.1 += 1;
        } else {
            o.0 += diff;
            o.1 += 1;
        }
    }
    Ok((t, o))
}

/// Mean damages over the `k` reports with the highest target damage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorstKSummary {
    pub k: usize,
    pub mean_target_damage: f64,
    pub mean_collateral_damage: f64,
    pub mean_subpop_test_count: f64,
}

/// Averages the top-`k` reports by target damage (ties keep input order).
pub fn worst_k_summary(reports: &[DamageReport], k: usize) -> Result<WorstKSummary> {
    if k == 0 || k > reports.len() {
        return Err(Error::InvalidArgument(format!(
            "k must be in 1..={}, got {k}",
            reports.len()
        )));
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| {
        reports[b]
            .target_damage
            .partial_cmp(&reports[a].target_damage)
            .expect("damages are finite")
    });
    let top = &order[..k];
    let inv = 1.0 / k as f64;
    Ok(WorstKSummary {
        k,
        mean_target_damage: top.iter().map(|&i| reports[i].target_damage).sum::<f64>() * inv,
        mean_collateral_damage: top
            .iter()
            .map(|&i| reports[i].collateral_damage)
            .sum::<f64>()
            * inv,
        mean_subpop_test_count: top
            .iter()
            .map(|&i| reports[i].subpop_test_count as f64)
            .sum::<f64>()
            * inv,
    })
}
