//! Subpopulation selection: annotation filters and cluster filters.
//!
//! A subpopulation is anything a pure predicate `F: point -> {0, 1}` can
//! carve out of the data. Two constructions are provided:
//!
//! - [`feature_match`] matches points whose annotation tag equals a target
//!   tag exactly.
//! - [`cluster_match`] embeds points with a surrogate model's intermediate
//!   representation, compresses with PCA, clusters with k-means, and emits
//!   one filter per cluster. The filters partition the data: every point
//!   falls in exactly one cluster.
//!
//! [`pick_cluster`] ranks cluster filters by attackability under three
//! strategies, defaulting to simulating a label-flip attack against the
//! surrogate in each cluster and picking the most damaged one.
//!
//! Selection only ever sees the auxiliary split and the surrogate model.

pub mod kmeans;
pub mod pca;

use serde::{Deserialize, Serialize};

use crate::attacks::{label_flip, AttackConfig};
use crate::data::{Dataset, LabeledPoint};
use crate::error::{Error, Result};
use crate::models::{self, Architecture, ModelParams, TrainConfig};
use crate::seed;

pub use kmeans::{kmeans, kmeans_with_restarts, KmeansFit};
pub use pca::{pca_fit, PcaModel};

/// Preprocessing and cluster geometry behind a set of cluster filters.
///
/// Serializable on its own so a clustering can be stored and reused; filters
/// are rebuilt from it plus the surrogate model that produced the
/// representations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterModel {
    /// Representation layer index fed to PCA (0 = raw features).
    pub layer: usize,
    /// PCA basis rows over the representation space.
    pub basis: Vec<Vec<f64>>,
    /// PCA centering mean.
    pub mean: Vec<f64>,
    /// k-means centers in the projected space.
    pub centers: Vec<Vec<f64>>,
    /// Final k-means inertia.
    pub inertia: f64,
}

impl ClusterModel {
    /// Cluster index of one input under this model's preprocessing.
    pub fn assign(&self, surrogate: &ModelParams, x: &[f64]) -> Result<usize> {
        let rep = models::representation(surrogate, x, self.layer)?;
        if rep.len() != self.mean.len() {
            return Err(Error::InvalidArgument(format!(
                "representation has {} dims, cluster model expects {}",
                rep.len(),
                self.mean.len()
            )));
        }
        let pca = PcaModel {
            basis: self.basis.clone(),
            mean: self.mean.clone(),
            explained_variance: vec![0.0; self.basis.len()],
        };
        let proj = pca.transform(&rep);
        Ok(kmeans::nearest_center(&proj, &self.centers).0)
    }
}

/// A pure membership predicate over labeled points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum FilterFunction {
    /// Matches points whose annotation equals `tag` exactly.
    Annotation { tag: String },
    /// Matches points landing in cluster `target` of a fitted clustering.
    Cluster {
        surrogate: Box<ModelParams>,
        model: ClusterModel,
        target: usize,
    },
}

impl FilterFunction {
    /// Evaluates the predicate.
    pub fn matches(&self, point: &LabeledPoint) -> Result<bool> {
        match self {
            Self::Annotation { tag } => Ok(point.annotation.as_deref() == Some(tag.as_str())),
            Self::Cluster {
                surrogate,
                model,
                target,
            } => Ok(model.assign(surrogate, &point.features)? == *target),
        }
    }

    /// Indices of matching points.
    pub fn member_indices(&self, data: &Dataset) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for (i, p) in data.points.iter().enumerate() {
            if self.matches(p)? {
                out.push(i);
            }
        }
        Ok(out)
    }

    /// Short display name for reports.
    pub fn describe(&self) -> String {
        match self {
            Self::Annotation { tag } => format!("tag:{tag}"),
            Self::Cluster { target, .. } => format!("cluster:{target}"),
        }
    }
}

/// Builds an annotation filter, checking that the tag occurs in `aux`.
///
/// A tag carried by every point is allowed (the filter is then all-matching
/// and collateral damage over it is undefined); an absent tag is an error.
pub fn feature_match(aux: &Dataset, tag: &str) -> Result<FilterFunction> {
    let occurs = aux
        .points
        .iter()
        .any(|p| p.annotation.as_deref() == Some(tag));
    if !occurs {
        return Err(Error::UnknownTag(tag.to_string()));
    }
    Ok(FilterFunction::Annotation {
        tag: tag.to_string(),
    })
}

/// All distinct annotation tags in a dataset, sorted.
pub fn annotation_tags(data: &Dataset) -> Vec<String> {
    let mut tags: Vec<String> = data
        .points
        .iter()
        .filter_map(|p| p.annotation.clone())
        .collect();
    tags.sort();
    tags.dedup();
    tags
}

/// Clusters `aux` in a surrogate representation space and returns one filter
/// per cluster plus the fitted [`ClusterModel`].
///
/// The requested PCA rank is clamped to what the representation matrix can
/// support (`min(r, n, dim)`), so small toy problems work with the same
/// defaults as wide ones.
pub fn cluster_match(
    aux: &Dataset,
    surrogate: &ModelParams,
    layer: usize,
    r: usize,
    k: usize,
    seed_value: u64,
) -> Result<(Vec<FilterFunction>, ClusterModel)> {
    if r == 0 {
        return Err(Error::InvalidArgument("pca rank must be positive".into()));
    }
    let reps = models::representation_matrix(surrogate, aux, layer)?;
    let r_eff = r.min(reps.nrows()).min(reps.ncols());
    let pca = pca::pca_fit(&reps.view(), r_eff)?;
    let projected = pca.transform_matrix(&reps.view());
    let fit = kmeans::kmeans(&projected.view(), k, seed_value)?;

    let model = ClusterModel {
        layer,
        basis: pca.basis,
        mean: pca.mean,
        centers: fit.centers,
        inertia: fit.inertia,
    };
    let filters = (0..k)
        .map(|target| FilterFunction::Cluster {
            surrogate: Box::new(surrogate.clone()),
            model: model.clone(),
            target,
        })
        .collect();
    Ok((filters, model))
}

/// How [`pick_cluster`] ranks cluster filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PickStrategy {
    /// Lowest mean surrogate confidence in the true label.
    LowestConfidence,
    /// Fewest members.
    Smallest,
    /// Highest target damage when a label-flip attack against the surrogate
    /// is simulated inside the cluster.
    #[default]
    HighestSurrogateDamage,
}

/// Picks which cluster to attack.
///
/// Empty clusters are skipped under every strategy; ties resolve to the
/// lowest cluster index. The damage-simulation strategy retrains the
/// surrogate architecture on `aux` plus a full-rate (`alpha = 1`) label
/// flip of each cluster and compares its error on the cluster's own aux
/// members before and after — all adversary-side quantities.
pub fn pick_cluster(
    filters: &[FilterFunction],
    aux: &Dataset,
    surrogate: &ModelParams,
    arch: &Architecture,
    train_cfg: &TrainConfig,
    strategy: PickStrategy,
    seed_value: u64,
) -> Result<usize> {
    if filters.is_empty() {
        return Err(Error::InvalidArgument("no filters to pick from".into()));
    }
    let mut members: Vec<Vec<usize>> = Vec::with_capacity(filters.len());
    for f in filters {
        members.push(f.member_indices(aux)?);
    }
    if members.iter().all(|m| m.is_empty()) {
        return Err(Error::EmptySubpopulation(
            "every filter matches zero aux points".into(),
        ));
    }

    match strategy {
        PickStrategy::Smallest => Ok(members
            .iter()
            .enumerate()
            .filter(|(_, m)| !m.is_empty())
            .min_by_key(|(_, m)| m.len())
            .map(|(i, _)| i)
            .expect("non-empty cluster exists")),
        PickStrategy::LowestConfidence => {
            let mut best: Option<(usize, f64)> = None;
            for (i, m) in members.iter().enumerate() {
                if m.is_empty() {
                    continue;
                }
                let mean_conf = m
                    .iter()
                    .map(|&idx| {
                        let p = &aux.points[idx];
                        models::probabilities(surrogate, &p.features)[p.label]
                    })
                    .sum::<f64>()
                    / m.len() as f64;
                if best.map_or(true, |(_, b)| mean_conf < b) {
                    best = Some((i, mean_conf));
                }
            }
            Ok(best.expect("non-empty cluster exists").0)
        }
        PickStrategy::HighestSurrogateDamage => {
            let mut best: Option<(usize, f64)> = None;
            for (i, m) in members.iter().enumerate() {
                if m.is_empty() {
                    continue;
                }
                let damage = simulate_flip_damage(
                    &filters[i],
                    m,
                    aux,
                    surrogate,
                    arch,
                    train_cfg,
                    seed::derive(seed_value, i as u64),
                )?;
                if best.map_or(true, |(_, b)| damage > b) {
                    best = Some((i, damage));
                }
            }
            Ok(best.expect("non-empty cluster exists").0)
        }
    }
}

/// Error increase on a cluster's aux members after retraining the surrogate
/// with a simulated full-rate label flip of that cluster.
fn simulate_flip_damage(
    filter: &FilterFunction,
    member_indices: &[usize],
    aux: &Dataset,
    surrogate: &ModelParams,
    arch: &Architecture,
    train_cfg: &TrainConfig,
    seed_value: u64,
) -> Result<f64> {
    let cfg = AttackConfig {
        poison_rate: 1.0,
        ..AttackConfig::default()
    };
    let poisons = label_flip(aux, filter, &cfg, surrogate, seed_value)?;
    let mut poisoned_aux = aux.clone();
    poisoned_aux.extend(poisons.points)?;
    let retrain_cfg = TrainConfig {
        seed: seed::derive(seed_value, 1),
        ..train_cfg.clone()
    };
    let poisoned_model = models::train(&poisoned_aux, arch, &retrain_cfg)?;

    let members = aux.subset(member_indices)?;
    let before = 1.0 - models::accuracy(surrogate, &members)?;
    let after = 1.0 - models::accuracy(&poisoned_model, &members)?;
    Ok(after - before)
}
