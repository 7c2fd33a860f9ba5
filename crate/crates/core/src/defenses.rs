//! Training-time defenses and their bookkeeping.
//!
//! [`trim`] and [`sever`] are iterative filter-and-refit defenses with a
//! shared skeleton: train on the kept set, score every training point at
//! the current fit, keep the `n − m` least suspicious, and stop at a fixed
//! point or after a maximum number of rounds. TRIM scores by loss, SEVER
//! by the squared projection of centered per-example gradients onto their
//! top singular direction.
//!
//! [`spectral_signatures`] and [`activation_clustering`] are
//! representation-space filters: they score or cluster each class's
//! intermediate activations and flag outlying points without retraining.
//!
//! All removal decisions are deterministic; score ties resolve toward
//! keeping the lower index.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::metrics;
use crate::models::{self, Architecture, ModelParams, TrainConfig};
use crate::select::{kmeans, pca, FilterFunction};

/// Default round cap for the iterative defenses.
pub const DEFAULT_DEFENSE_ITERS: usize = 5;

const AC_KMEANS_SEED: u64 = 0xAC;
const AC_SIZE_THRESHOLD: f64 = 0.35;
const AC_PCA_DIMS: usize = 3;

/// What an iterative defense did to one training set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseRun {
    /// Model trained on the final kept set.
    pub final_model: ModelParams,
    /// Training indices the defense removed.
    pub removed_indices: BTreeSet<usize>,
    /// Fraction of provenance-tagged poisons among the removed points
    /// (0 when the training set contains no poisons).
    pub found_fraction: f64,
    /// Removed points over training size.
    pub removed_fraction: f64,
    /// Refit rounds actually executed.
    pub iterations: usize,
    /// Whether a kept-set fixed point was reached within the round cap.
    pub converged: bool,
    /// Set when the defense could not act (degenerate score geometry).
    pub warning: Option<String>,
}

/// [`DefenseRun`] extended with before/after damage on a test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseOutcome {
    pub final_model: ModelParams,
    pub removed_indices: BTreeSet<usize>,
    pub found_fraction: f64,
    pub removed_fraction: f64,
    /// Target damage of the undefended poisoned model.
    pub target_before: f64,
    /// Target damage of the defended model.
    pub target_after: f64,
    /// Collateral damage of the defended model.
    pub collateral_after: f64,
}

/// Loss-trimming defense: iteratively refit and keep the `n − m`
/// lowest-loss points until the kept set stops changing (or `max_iters`
/// rounds).
///
/// `m` is the suspected poison count; the first round trains on the full
/// set, so a strong-enough attack can steer which points look lossy —
/// trimming is not guaranteed to remove poisons.
pub fn trim(
    data: &Dataset,
    arch: &Architecture,
    cfg: &TrainConfig,
    m: usize,
    max_iters: usize,
) -> Result<DefenseRun> {
    iterative_defense(data, arch, cfg, m, max_iters, |model, data| {
        Ok(Some(models::per_example_loss(model, data)?))
    })
}

/// Gradient-outlier defense: like [`trim`], but scores each point by the
/// squared projection of its centered per-example parameter gradient onto
/// the top singular direction of the centered gradient matrix.
///
/// When the centered gradients are all zero (e.g. every point identical)
/// there is no outlier direction; the run stops with a warning and removes
/// nothing further.
pub fn sever(
    data: &Dataset,
    arch: &Architecture,
    cfg: &TrainConfig,
    m: usize,
    max_iters: usize,
) -> Result<DefenseRun> {
    iterative_defense(data, arch, cfg, m, max_iters, |model, data| {
        let grads = models::per_example_grad_matrix(model, data)?;
        Ok(sever_scores(&grads.view()))
    })
}

/// SEVER's outlier scores for a gradient matrix (one row per point):
/// center the rows, take the top right-singular direction, and score each
/// row by its squared projection. Returns `None` when the centered matrix
/// is all zeros.
pub fn sever_scores(gradients: &ArrayView2<f64>) -> Option<Vec<f64>> {
    let mut centered = gradients.to_owned();
    linalg::center_rows(&mut centered);
    let v = linalg::top_right_singular(&centered.view())?;
    Some(
        centered
            .rows()
            .into_iter()
            .map(|row| {
                let p = row.dot(&v);
                p * p
            })
            .collect(),
    )
}

fn iterative_defense(
    data: &Dataset,
    arch: &Architecture,
    cfg: &TrainConfig,
    m: usize,
    max_iters: usize,
    score: impl Fn(&ModelParams, &Dataset) -> Result<Option<Vec<f64>>>,
) -> Result<DefenseRun> {
    let n = data.len();
    if m >= n {
        return Err(Error::InvalidArgument(format!(
            "suspected poison count {m} must be below the training size {n}"
        )));
    }
    if max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be positive".into()));
    }

    let mut kept: Vec<usize> = (0..n).collect();
    let mut iterations = 0;
    let mut converged = false;
    let mut warning = None;
    let model = loop {
        let fitted = models::train(&data.subset(&kept)?, arch, cfg)?;
        iterations += 1;
        let new_kept = match score(&fitted, data)? {
            Some(scores) => lowest_indices(&scores, n - m),
            None => {
                warning = Some("degenerate scores: no outlier direction, nothing removed".into());
                converged = true;
                break fitted;
            }
        };
        if new_kept == kept {
            converged = true;
            break fitted;
        }
        kept = new_kept;
        if iterations == max_iters {
            // The kept set moved on the last round; refit so the returned
            // model matches the returned kept set.
            break models::train(&data.subset(&kept)?, arch, cfg)?;
        }
    };
    let removed: BTreeSet<usize> = {
        let kept_set: BTreeSet<usize> = kept.iter().copied().collect();
        (0..n).filter(|i| !kept_set.contains(i)).collect()
    };
    Ok(bookkeep(data, model, removed, iterations, converged, warning))
}

/// Indices of the `count` lowest scores, ascending; ties keep the lower
/// index. Result is sorted by index.
fn lowest_indices(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..count].to_vec();
    kept.sort_unstable();
    kept
}

fn bookkeep(
    data: &Dataset,
    final_model: ModelParams,
    removed_indices: BTreeSet<usize>,
    iterations: usize,
    converged: bool,
    warning: Option<String>,
) -> DefenseRun {
    let poisons = data.poison_indices();
    let found_fraction = if poisons.is_empty() {
        0.0
    } else {
        poisons
            .iter()
            .filter(|i| removed_indices.contains(i))
            .count() as f64
            / poisons.len() as f64
    };
    let removed_fraction = removed_indices.len() as f64 / data.len() as f64;
    DefenseRun {
        final_model,
        removed_indices,
        found_fraction,
        removed_fraction,
        iterations,
        converged,
        warning,
    }
}

/// Trains on the complement of an externally decided removal set and fills
/// the usual bookkeeping, so filter-style defenses plug into the same
/// reporting as the iterative ones.
pub fn run_from_removal(
    data: &Dataset,
    arch: &Architecture,
    cfg: &TrainConfig,
    removed: &BTreeSet<usize>,
) -> Result<DefenseRun> {
    let kept: Vec<usize> = (0..data.len()).filter(|i| !removed.contains(i)).collect();
    if kept.is_empty() {
        return Err(Error::InvalidArgument(
            "removal set covers the whole training set".into(),
        ));
    }
    let model = models::train(&data.subset(&kept)?, arch, cfg)?;
    Ok(bookkeep(data, model, removed.clone(), 1, true, None))
}

/// Per-class removal budget for [`spectral_signatures`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SpectralBudget {
    /// Suspected poison counts per class; class `c` removes
    /// `round(multiplier · counts[c])` points.
    SuspectedCounts { counts: Vec<usize>, multiplier: f64 },
    /// Suspected poison fraction of each class; class `c` removes
    /// `floor(multiplier · fraction · n_c)` points.
    Fraction { fraction: f64, multiplier: f64 },
}

impl Default for SpectralBudget {
    /// The conventional 1.5× budget over a 10% suspicion rate — removes
    /// 15% of each class.
    fn default() -> Self {
        SpectralBudget::Fraction {
            fraction: 0.1,
            multiplier: 1.5,
        }
    }
}

/// Flags training points whose class-centered representations project
/// strongest onto the class's top singular direction.
///
/// Classes with fewer than two points, or whose centered representations
/// are all zero, are skipped. Budgets are clamped to leave at least one
/// point per class.
pub fn spectral_signatures(
    data: &Dataset,
    model: &ModelParams,
    layer: usize,
    budget: &SpectralBudget,
) -> Result<BTreeSet<usize>> {
    if let SpectralBudget::SuspectedCounts { counts, .. } = budget {
        if counts.len() != data.num_classes {
            return Err(Error::InvalidArgument(format!(
                "budget lists {} classes, data has {}",
                counts.len(),
                data.num_classes
            )));
        }
    }
    if let SpectralBudget::Fraction { fraction, .. } = budget {
        if !(0.0..=1.0).contains(fraction) {
            return Err(Error::InvalidArgument(format!(
                "suspected fraction must be in [0, 1], got {fraction}"
            )));
        }
    }
    let reps = models::representation_matrix(model, data, layer)?;

    let mut removed = BTreeSet::new();
    for class in 0..data.num_classes {
        let members: Vec<usize> = (0..data.len())
            .filter(|&i| data.points[i].label == class)
            .collect();
        let n_c = members.len();
        if n_c < 2 {
            continue;
        }
        let budget_c = match budget {
            SpectralBudget::SuspectedCounts { counts, multiplier } => {
                (multiplier * counts[class] as f64).round() as usize
            }
            SpectralBudget::Fraction {
                fraction,
                multiplier,
            } => (multiplier * fraction * n_c as f64).floor() as usize,
        }
        .min(n_c - 1);
        if budget_c == 0 {
            continue;
        }

        let mut class_reps = Array2::zeros((n_c, reps.ncols()));
        for (row, &i) in members.iter().enumerate() {
            class_reps.row_mut(row).assign(&reps.row(i));
        }
        linalg::center_rows(&mut class_reps);
        let v = match linalg::top_right_singular(&class_reps.view()) {
            Some(v) => v,
            None => continue,
        };
        let mut scored: Vec<(f64, usize)> = members
            .iter()
            .enumerate()
            .map(|(row, &i)| {
                let p = class_reps.row(row).dot(&v);
                (p * p, i)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores").then(a.1.cmp(&b.1)));
        removed.extend(scored[..budget_c].iter().map(|&(_, i)| i));
    }
    Ok(removed)
}

/// Flags, per class, the smaller of two activation clusters when it holds
/// less than 35% of the class.
///
/// Representations are reduced to (at most) three PCA dimensions before
/// 2-means. Classes with fewer than two points are skipped; an exact
/// 50/50 split is never flagged.
pub fn activation_clustering(
    data: &Dataset,
    model: &ModelParams,
    layer: usize,
) -> Result<BTreeSet<usize>> {
    let reps = models::representation_matrix(model, data, layer)?;

    let mut removed = BTreeSet::new();
    for class in 0..data.num_classes {
        let members: Vec<usize> = (0..data.len())
            .filter(|&i| data.points[i].label == class)
            .collect();
        let n_c = members.len();
        if n_c < 2 {
            continue;
        }
        let mut class_reps = Array2::zeros((n_c, reps.ncols()));
        for (row, &i) in members.iter().enumerate() {
            class_reps.row_mut(row).assign(&reps.row(i));
        }
        let r = AC_PCA_DIMS.min(n_c).min(class_reps.ncols());
        let projected = {
            let fitted = pca::pca_fit(&class_reps.view(), r)?;
            fitted.transform_matrix(&class_reps.view())
        };
        let fit = kmeans::kmeans(&projected.view(), 2, AC_KMEANS_SEED)?;
        let size1 = fit.assignments.iter().filter(|&&a| a == 1).count();
        let size0 = n_c - size1;
        let (small, small_size) = if size0 < size1 {
            (0, size0)
        } else if size1 < size0 {
            (1, size1)
        } else {
            continue;
        };
        if small_size == 0 {
            continue;
        }
        if (small_size as f64) / (n_c as f64) < AC_SIZE_THRESHOLD {
            removed.extend(
                fit.assignments
                    .iter()
                    .enumerate()
                    .filter(|&(_, a)| *a == small)
                    .map(|(row, _)| members[row]),
            );
        }
    }
    Ok(removed)
}

/// Completes a [`DefenseRun`] with before/after damage measurements.
///
/// `undefended` is the model trained on the full poisoned set; the "after"
/// numbers use the run's final model.
pub fn evaluate_defense(
    clean: &ModelParams,
    undefended: &ModelParams,
    run: &DefenseRun,
    test: &Dataset,
    filter: &FilterFunction,
) -> Result<DefenseOutcome> {
    Ok(DefenseOutcome {
        final_model: run.final_model.clone(),
        removed_indices: run.removed_indices.clone(),
        found_fraction: run.found_fraction,
        removed_fraction: run.removed_fraction,
        target_before: metrics::target_damage(clean, undefended, test, filter)?,
        target_after: metrics::target_damage(clean, &run.final_model, test, filter)?,
        collateral_after: metrics::collateral_damage(clean, &run.final_model, test, filter)?,
    })
}
