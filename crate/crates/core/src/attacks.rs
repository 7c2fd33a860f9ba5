//! Poison generation: label flipping plus two feature-crafting optimizers.
//!
//! [`label_flip`] samples points from the targeted subpopulation and
//! relabels them with the single most damaging label. [`grad_opt`] and
//! [`influence_attack`] then move the sampled features to strengthen the
//! attack, ascending the alignment between the poison gradients and a
//! target-set gradient:
//!
//! ```text
//! Obj(X_p) = g_aᵀ · M · Σ_j ∇_θ ℓ(x_j, y_j)        g_a = mean ∇_θ ℓ over the target set
//! ```
//!
//! with `M = I` for [`grad_opt`] (one training step moves parameters along
//! `−Σ_j ∇_θ ℓ`, so a large positive alignment drags the target-set loss
//! down the most) and `M = H⁻¹` for [`influence_attack`] (the influence
//! approximation of full retraining). The target set's labels decide what
//! the optimizer promotes: passing the subpopulation with its poisoned
//! labels crafts points that pull the victim toward those labels.
//!
//! Both optimizers support the linear model only, where the mixed
//! derivative `∇_x (gᵀ ∇_θ ℓ)` and the Hessian have closed forms.

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, LabeledPoint, Provenance};
use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{self, Architecture, ModelParams};
use crate::seed;
use crate::select::FilterFunction;

/// How [`label_flip`] chooses the poison label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetLabel {
    /// The non-majority label maximizing mean surrogate loss on the
    /// sampled points.
    #[default]
    MaxLoss,
    /// A caller-chosen label (still rejected if it equals the
    /// subpopulation's majority label).
    Fixed(usize),
}

/// Shared attack knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Poison budget relative to the subpopulation's auxiliary size;
    /// the poison count is `round(poison_rate · m)`.
    pub poison_rate: f64,
    /// Label rule for [`label_flip`].
    pub target_label: TargetLabel,
    /// Ascent steps for the crafting optimizers.
    pub steps: usize,
    /// Ascent step size.
    pub step_size: f64,
    /// Clamp crafted features to the dataset bounds after every step.
    pub clamp: bool,
    /// Skip the Hessian solve in [`influence_attack`] and use `M = I`
    /// (diagnostic mode; makes it coincide with [`grad_opt`]).
    pub hessian_identity: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            poison_rate: 1.0,
            target_label: TargetLabel::MaxLoss,
            steps: 50,
            step_size: 0.1,
            clamp: true,
            hessian_identity: false,
        }
    }
}

/// Which attack produced a poison set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    LabelFlip,
    GradOpt,
    Influence,
}

/// A batch of poison points destined for the victim's training set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonSet {
    /// The crafted points, all carrying poison provenance.
    pub points: Vec<LabeledPoint>,
    /// Display name of the filter the attack targeted.
    pub origin: String,
    /// The attack that produced the points.
    pub generator: Generator,
    /// The poison rate the set was sized with.
    pub alpha: f64,
    /// The single flip label, when the attack uses one.
    pub flip_label: Option<usize>,
}

impl PoisonSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Samples `round(poison_rate · m)` points from the filtered subpopulation
/// of `aux` (with replacement only when the rate exceeds 1) and relabels
/// them with one label chosen by `cfg.target_label`.
///
/// The poison label never equals the subpopulation's majority true label.
/// Sampled points keep their features, annotation, and subpopulation id;
/// provenance is switched to poison.
pub fn label_flip(
    aux: &Dataset,
    filter: &FilterFunction,
    cfg: &AttackConfig,
    surrogate: &ModelParams,
    seed_value: u64,
) -> Result<PoisonSet> {
    if !(cfg.poison_rate.is_finite() && cfg.poison_rate > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "poison_rate must be positive and finite, got {}",
            cfg.poison_rate
        )));
    }
    let members = filter.member_indices(aux)?;
    if members.is_empty() {
        return Err(Error::EmptySubpopulation(filter.describe()));
    }
    let m = members.len();
    let count = (cfg.poison_rate * m as f64).round() as usize;

    let mut rng = seed::rng(seed_value);
    let sampled: Vec<usize> = data::sample_indices(m, count, &mut rng)
        .into_iter()
        .map(|i| members[i])
        .collect();

    let majority = majority_label(aux, &members);
    // Score candidate labels on the sampled points; an empty sample (the
    // rate rounded to zero) falls back to the whole subpopulation so the
    // reported flip label stays meaningful.
    let scoring: &[usize] = if sampled.is_empty() {
        &members
    } else {
        &sampled
    };
    let flip = match cfg.target_label {
        TargetLabel::Fixed(t) => {
            if t >= aux.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "fixed poison label {t} outside 0..{}",
                    aux.num_classes
                )));
            }
            if t == majority {
                return Err(Error::InvalidArgument(format!(
                    "fixed poison label {t} equals the subpopulation's majority label"
                )));
            }
            t
        }
        TargetLabel::MaxLoss => max_loss_label(aux, surrogate, scoring, majority),
    };

    let points = sampled
        .iter()
        .map(|&i| {
            let mut p = aux.points[i].clone();
            p.label = flip;
            p.provenance = Provenance::Poison;
            p
        })
        .collect();
    Ok(PoisonSet {
        points,
        origin: filter.describe(),
        generator: Generator::LabelFlip,
        alpha: cfg.poison_rate,
        flip_label: Some(flip),
    })
}

fn majority_label(data: &Dataset, indices: &[usize]) -> usize {
    let mut counts = vec![0usize; data.num_classes];
    for &i in indices {
        counts[data.points[i].label] += 1;
    }
    counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)
        .unwrap_or(0)
}

fn max_loss_label(
    data: &Dataset,
    surrogate: &ModelParams,
    indices: &[usize],
    majority: usize,
) -> usize {
    let mut best = usize::MAX;
    let mut best_loss = f64::NEG_INFINITY;
    for t in 0..data.num_classes {
        if t == majority {
            continue;
        }
        let mean_loss = indices
            .iter()
            .map(|&i| {
                let logits = surrogate.logits(&data.points[i].features);
                let probs = models::softmax(&logits);
                -probs[t].max(f64::MIN_POSITIVE).ln()
            })
            .sum::<f64>()
            / indices.len() as f64;
        if mean_loss > best_loss {
            best_loss = mean_loss;
            best = t;
        }
    }
    best
}

/// Refines poison features by ascending the gradient-alignment objective
/// with `M = I` (one-step training model).
///
/// Runs `cfg.steps` fixed-size ascent steps per point, clamping to `bounds`
/// when `cfg.clamp` is set, and returns the iterate with the highest
/// objective — so the result is never worse than the initialization.
/// Labels are held fixed.
pub fn grad_opt(
    init: &PoisonSet,
    surrogate: &ModelParams,
    target_set: &Dataset,
    cfg: &AttackConfig,
    bounds: Option<&[(f64, f64)]>,
) -> Result<PoisonSet> {
    let g_a = target_gradient(surrogate, target_set)?;
    let points = ascend_alignment(init, surrogate, &g_a, cfg, bounds)?;
    Ok(PoisonSet {
        points,
        origin: init.origin.clone(),
        generator: Generator::GradOpt,
        alpha: init.alpha,
        flip_label: init.flip_label,
    })
}

/// Refines poison features by ascending the influence objective
/// (`M = H⁻¹`), approximating how full retraining would move the
/// target-set loss.
///
/// `hessian_data` is the training view the Hessian is taken over (the
/// adversary's stand-in for the victim's training set) and `l2_reg` its
/// ridge term, which must be positive so the Hessian is positive definite.
/// The solve `H u = g_a` runs matrix-free conjugate gradients capped at
/// `10 · dim` iterations.
pub fn influence_attack(
    init: &PoisonSet,
    surrogate: &ModelParams,
    hessian_data: &Dataset,
    l2_reg: f64,
    target_set: &Dataset,
    cfg: &AttackConfig,
    bounds: Option<&[(f64, f64)]>,
) -> Result<PoisonSet> {
    let g_a = target_gradient(surrogate, target_set)?;
    let u = if cfg.hessian_identity {
        g_a
    } else {
        solve_hessian(surrogate, hessian_data, l2_reg, &g_a)?
    };
    let points = ascend_alignment(init, surrogate, &u, cfg, bounds)?;
    Ok(PoisonSet {
        points,
        origin: init.origin.clone(),
        generator: Generator::Influence,
        alpha: init.alpha,
        flip_label: init.flip_label,
    })
}

/// First-order prediction of the target-set loss change from adding one
/// training point, without retraining.
///
/// At a ridge optimum `θ̂` over `n` points, adding `p` moves the optimum by
/// `Δθ ≈ −H⁻¹ (∇ℓ_p + λθ̂) / (n + 1)`; the returned value is
/// `∇L_targetᵀ Δθ` with `L_target` the mean cross-entropy over
/// `target_set`. Used to sanity-check the influence machinery against a
/// retrain-from-scratch oracle.
pub fn influence_predicted_change(
    model: &ModelParams,
    hessian_data: &Dataset,
    l2_reg: f64,
    target_set: &Dataset,
    point: &LabeledPoint,
) -> Result<f64> {
    let g_target = target_gradient(model, target_set)?;
    let mut rhs = models::example_grad_params(model, &point.features, point.label);
    for (r, t) in rhs.iter_mut().zip(&model.theta) {
        *r += l2_reg * t;
    }
    let w = solve_hessian(model, hessian_data, l2_reg, &rhs)?;
    let n = hessian_data.len() as f64;
    Ok(-dot(&g_target, &w) / (n + 1.0))
}

/// The crafting objective `Σ_j g_aᵀ ∇_θ ℓ(x_j, y_j)` for a candidate poison
/// batch, with `g_a` the mean parameter gradient over `target_set`.
///
/// This is exactly the quantity [`grad_opt`] ascends; exposed so external
/// checks can compare the analytic ascent direction against numerical
/// differentiation of the objective.
pub fn alignment_score(
    surrogate: &ModelParams,
    target_set: &Dataset,
    points: &[LabeledPoint],
) -> Result<f64> {
    let g_a = target_gradient(surrogate, target_set)?;
    Ok(alignment_objective(surrogate, &g_a, points))
}

/// Analytic gradient of the crafting objective with respect to one poison
/// point's features — the per-point ascent direction used by [`grad_opt`].
pub fn alignment_feature_grad(
    surrogate: &ModelParams,
    target_set: &Dataset,
    x: &[f64],
    y: usize,
) -> Result<Vec<f64>> {
    let g_a = target_gradient(surrogate, target_set)?;
    if y >= surrogate.arch.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "label {y} out of range for {} classes",
            surrogate.arch.num_classes()
        )));
    }
    if x.len() != surrogate.arch.feature_dim() {
        return Err(Error::InvalidArgument(format!(
            "point has {} features, model expects {}",
            x.len(),
            surrogate.arch.feature_dim()
        )));
    }
    Ok(alignment_input_grad(surrogate, &g_a, x, y))
}

fn target_gradient(surrogate: &ModelParams, target_set: &Dataset) -> Result<Vec<f64>> {
    if !matches!(surrogate.arch, Architecture::Linear { .. }) {
        return Err(Error::UnsupportedArchitecture(
            "poison optimizers support linear surrogates only".into(),
        ));
    }
    if target_set.is_empty() {
        return Err(Error::EmptySubpopulation("empty target set".into()));
    }
    models::mean_grad_params(surrogate, target_set)
}

fn solve_hessian(
    model: &ModelParams,
    hessian_data: &Dataset,
    l2_reg: f64,
    rhs: &[f64],
) -> Result<Vec<f64>> {
    if !(l2_reg.is_finite() && l2_reg > 0.0) {
        return Err(Error::NonPositiveDefiniteHessian(format!(
            "ridge term must be positive for an invertible Hessian, got {l2_reg}"
        )));
    }
    if hessian_data.is_empty() {
        return Err(Error::InvalidArgument(
            "hessian dataset is empty".into(),
        ));
    }
    let dim = model.theta.len();
    let apply =
        |v: &[f64]| models::hessian_vector_product(model, hessian_data, l2_reg, v).expect("hvp");
    let (u, _) = linalg::conjugate_gradient(apply, rhs, 10 * dim, 1e-10)?;
    Ok(u)
}

fn ascend_alignment(
    init: &PoisonSet,
    surrogate: &ModelParams,
    g: &[f64],
    cfg: &AttackConfig,
    bounds: Option<&[(f64, f64)]>,
) -> Result<Vec<LabeledPoint>> {
    if !(cfg.step_size.is_finite() && cfg.step_size > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step_size must be positive and finite, got {}",
            cfg.step_size
        )));
    }
    let bounds = if cfg.clamp {
        Some(bounds.ok_or(Error::MissingBounds)?)
    } else {
        None
    };
    if let Some(b) = bounds {
        if let Some(p) = init.points.first() {
            if b.len() != p.features.len() {
                return Err(Error::InvalidArgument(format!(
                    "bounds cover {} features, points have {}",
                    b.len(),
                    p.features.len()
                )));
            }
        }
    }

    let mut points: Vec<LabeledPoint> = init.points.clone();
    let mut best = points.clone();
    let mut best_obj = alignment_objective(surrogate, g, &points);
    for _ in 0..cfg.steps {
        for p in &mut points {
            let dir = alignment_input_grad(surrogate, g, &p.features, p.label);
            for (x, d) in p.features.iter_mut().zip(&dir) {
                *x += cfg.step_size * d;
            }
            if let Some(b) = bounds {
                for (x, (lo, hi)) in p.features.iter_mut().zip(b) {
                    *x = x.clamp(*lo, *hi);
                }
            }
        }
        let obj = alignment_objective(surrogate, g, &points);
        if obj > best_obj {
            best_obj = obj;
            best = points.clone();
        }
    }
    Ok(best)
}

/// `Σ_j gᵀ ∇_θ ℓ(x_j, y_j)` over a poison candidate set.
fn alignment_objective(model: &ModelParams, g: &[f64], points: &[LabeledPoint]) -> f64 {
    points
        .iter()
        .map(|p| dot(g, &models::example_grad_params(model, &p.features, p.label)))
        .sum()
}

/// Gradient of `gᵀ ∇_θ ℓ(x, y)` with respect to `x` for the linear model.
///
/// With per-class weight rows `w_c`, probabilities `p`, and the split
/// `g = (g_W rows g_c, g_b)`, writing `s_c = g_c·x + g_{b,c}`:
///
/// ```text
/// ∇_x = Σ_c p_c s_c w_c − (Σ_c p_c s_c) · Σ_c p_c w_c + Σ_c p_c g_c − g_y
/// ```
fn alignment_input_grad(model: &ModelParams, g: &[f64], x: &[f64], y: usize) -> Vec<f64> {
    let k = model.arch.num_classes();
    let d = model.arch.feature_dim();
    let w_len = k * d;
    let (w, _) = model.layer(0);
    let p = models::probabilities(model, x);

    let mut out = vec![0.0; d];
    let mut sp = 0.0;
    let mut w_bar = vec![0.0; d];
    for c in 0..k {
        let g_row = &g[c * d..(c + 1) * d];
        let w_row = &w[c * d..(c + 1) * d];
        let s_c = dot(g_row, x) + g[w_len + c];
        let coef = p[c] * s_c;
        sp += coef;
        for j in 0..d {
            out[j] += coef * w_row[j] + p[c] * g_row[j];
            w_bar[j] += p[c] * w_row[j];
        }
    }
    let g_y = &g[y * d..(y + 1) * d];
    for j in 0..d {
        out[j] -= sp * w_bar[j] + g_y[j];
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_gaussian_subpops, BlobSpec};
    use crate::models::TrainConfig;
    use crate::select::feature_match;

    fn two_blob_data(per_blob: usize, seed_value: u64) -> Dataset {
        let blobs = vec![
            BlobSpec {
                center: vec![-2.0, 0.0],
                sigma: 0.6,
                count: per_blob,
                label: 0,
            },
            BlobSpec {
                center: vec![2.0, 0.0],
                sigma: 0.6,
                count: per_blob,
                label: 1,
            },
        ];
        synth_gaussian_subpops(&blobs, 2, seed_value).unwrap()
    }

    fn trained_surrogate(data: &Dataset, seed_value: u64) -> ModelParams {
        let cfg = TrainConfig {
            epochs: 200,
            seed: seed_value,
            ..TrainConfig::default()
        };
        models::train(data, &Architecture::linear(data.feature_dim, data.num_classes), &cfg)
            .unwrap()
    }

    #[test]
    fn label_flip_sizes_the_poison_set_exactly() {
        let data = two_blob_data(40, 1);
        let filter = feature_match(&data, "1").unwrap();
        let surrogate = trained_surrogate(&data, 2);
        for (rate, expect) in [(0.5, 20), (1.0, 40), (2.0, 80), (0.26, 10)] {
            let cfg = AttackConfig {
                poison_rate: rate,
                ..AttackConfig::default()
            };
            let set = label_flip(&data, &filter, &cfg, &surrogate, 3).unwrap();
            assert_eq!(set.len(), expect, "rate {rate}");
            assert!(set
                .points
                .iter()
                .all(|p| p.provenance == Provenance::Poison));
            assert!(set.points.iter().all(|p| p.label == 0));
            assert_eq!(set.flip_label, Some(0));
        }
    }

    #[test]
    fn label_flip_with_replacement_reuses_subpopulation_features() {
        let data = two_blob_data(10, 4);
        let filter = feature_match(&data, "0").unwrap();
        let surrogate = trained_surrogate(&data, 5);
        let cfg = AttackConfig {
            poison_rate: 2.0,
            ..AttackConfig::default()
        };
        let set = label_flip(&data, &filter, &cfg, &surrogate, 6).unwrap();
        assert_eq!(set.len(), 20);
        // Every poison's features belong to some subpopulation member.
        let member_features: Vec<&Vec<f64>> = data
            .points
            .iter()
            .filter(|p| p.subpop_id == Some(0))
            .map(|p| &p.features)
            .collect();
        for poison in &set.points {
            assert!(member_features.iter().any(|f| **f == poison.features));
        }
    }

    #[test]
    fn binary_flip_is_the_non_majority_class() {
        let data = two_blob_data(15, 7);
        let surrogate = trained_surrogate(&data, 8);
        let cfg = AttackConfig::default();
        let f0 = feature_match(&data, "0").unwrap();
        let f1 = feature_match(&data, "1").unwrap();
        assert_eq!(
            label_flip(&data, &f0, &cfg, &surrogate, 9).unwrap().flip_label,
            Some(1)
        );
        assert_eq!(
            label_flip(&data, &f1, &cfg, &surrogate, 9).unwrap().flip_label,
            Some(0)
        );
    }

    #[test]
    fn max_loss_label_picks_the_least_likely_class() {
        // Three classes; surrogate assigns class 2 essentially zero
        // probability on the subpopulation, so the max-loss label is 2.
        let points = vec![
            LabeledPoint {
                features: vec![1.0, 0.0],
                label: 0,
                annotation: Some("s".into()),
                subpop_id: Some(0),
                provenance: Provenance::Clean,
            },
            LabeledPoint {
                features: vec![1.2, 0.1],
                label: 0,
                annotation: Some("s".into()),
                subpop_id: Some(0),
                provenance: Provenance::Clean,
            },
            LabeledPoint {
                features: vec![0.9, -0.1],
                label: 1,
                annotation: Some("other".into()),
                subpop_id: Some(1),
                provenance: Provenance::Clean,
            },
        ];
        let data = Dataset::new(points, 3).unwrap();
        // Logits: class 0 = 4·x1, class 1 = 2·x1, class 2 = −6·x1.
        let theta = vec![4.0, 0.0, 2.0, 0.0, -6.0, 0.0, 0.0, 0.0, 0.0];
        let surrogate = ModelParams::from_theta(Architecture::linear(2, 3), theta).unwrap();
        let filter = feature_match(&data, "s").unwrap();
        let set = label_flip(&data, &filter, &AttackConfig::default(), &surrogate, 10).unwrap();
        assert_eq!(set.flip_label, Some(2));

        // Oracle: mean loss per candidate label, computed directly.
        let members: Vec<usize> = vec![0, 1];
        let mut losses = vec![0.0; 3];
        for t in 0..3 {
            losses[t] = members
                .iter()
                .map(|&i| {
                    let logits = surrogate.logits(&data.points[i].features);
                    let probs = models::softmax(&logits);
                    -probs[t].ln()
                })
                .sum::<f64>()
                / members.len() as f64;
        }
        assert!(losses[2] > losses[1] && losses[2] > losses[0]);
    }

    #[test]
    fn fixed_label_equal_to_majority_is_rejected() {
        let data = two_blob_data(10, 11);
        let filter = feature_match(&data, "1").unwrap();
        let surrogate = trained_surrogate(&data, 12);
        let cfg = AttackConfig {
            target_label: TargetLabel::Fixed(1),
            ..AttackConfig::default()
        };
        assert!(matches!(
            label_flip(&data, &filter, &cfg, &surrogate, 13).unwrap_err(),
            Error::InvalidArgument(_)
        ));
    }

    #[test]
    fn label_flip_is_deterministic_and_seed_sensitive() {
        let data = two_blob_data(30, 14);
        let filter = feature_match(&data, "0").unwrap();
        let surrogate = trained_surrogate(&data, 15);
        let cfg = AttackConfig {
            poison_rate: 0.5,
            ..AttackConfig::default()
        };
        let a = label_flip(&data, &filter, &cfg, &surrogate, 16).unwrap();
        let b = label_flip(&data, &filter, &cfg, &surrogate, 16).unwrap();
        let c = label_flip(&data, &filter, &cfg, &surrogate, 17).unwrap();
        assert_eq!(
            a.points.iter().map(|p| &p.features).collect::<Vec<_>>(),
            b.points.iter().map(|p| &p.features).collect::<Vec<_>>()
        );
        assert_ne!(
            a.points.iter().map(|p| &p.features).collect::<Vec<_>>(),
            c.points.iter().map(|p| &p.features).collect::<Vec<_>>()
        );
    }

    #[test]
    fn empty_subpopulation_errors() {
        let mut data = two_blob_data(10, 18);
        for p in &mut data.points {
            p.annotation = Some("all".into());
        }
        data.points[0].annotation = Some("rare".into());
        let filter = feature_match(&data, "rare").unwrap();
        data.points[0].annotation = Some("all".into());
        let surrogate = trained_surrogate(&data, 19);
        assert!(matches!(
            label_flip(&data, &filter, &AttackConfig::default(), &surrogate, 20).unwrap_err(),
            Error::EmptySubpopulation(_)
        ));
    }

    fn flip_and_targets(
        data: &Dataset,
        tag: &str,
        surrogate: &ModelParams,
        rate: f64,
        seed_value: u64,
    ) -> (PoisonSet, Dataset) {
        let filter = feature_match(data, tag).unwrap();
        let cfg = AttackConfig {
            poison_rate: rate,
            ..AttackConfig::default()
        };
        let set = label_flip(data, &filter, &cfg, surrogate, seed_value).unwrap();
        let members = filter.member_indices(data).unwrap();
        let mut targets = data.subset(&members).unwrap();
        let flip = set.flip_label.unwrap();
        for p in &mut targets.points {
            p.label = flip;
        }
        (set, targets)
    }

    #[test]
    fn grad_opt_analytic_gradient_matches_finite_differences() {
        let data = two_blob_data(12, 21);
        let surrogate = trained_surrogate(&data, 22);
        let (set, targets) = flip_and_targets(&data, "1", &surrogate, 0.5, 23);
        let g_a = models::mean_grad_params(&surrogate, &targets).unwrap();

        let h = 1e-5;
        for p in set.points.iter().take(3) {
            let analytic = alignment_input_grad(&surrogate, &g_a, &p.features, p.label);
            for j in 0..p.features.len() {
                let mut up = p.clone();
                up.features[j] += h;
                let mut down = p.clone();
                down.features[j] -= h;
                let numeric = (alignment_objective(&surrogate, &g_a, &[up])
                    - alignment_objective(&surrogate, &g_a, &[down]))
                    / (2.0 * h);
                let scale = analytic[j].abs().max(numeric.abs());
                if scale > 1e-8 {
                    assert!(
                        (analytic[j] - numeric).abs() / scale < 1e-4,
                        "coordinate {j}: {} vs {numeric}",
                        analytic[j]
                    );
                } else {
                    assert!((analytic[j] - numeric).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn grad_opt_zero_steps_returns_init_unchanged() {
        let data = two_blob_data(10, 24);
        let surrogate = trained_surrogate(&data, 25);
        let (set, targets) = flip_and_targets(&data, "0", &surrogate, 1.0, 26);
        let cfg = AttackConfig {
            steps: 0,
            ..AttackConfig::default()
        };
        let out = grad_opt(&set, &surrogate, &targets, &cfg, Some(&data.bounds)).unwrap();
        assert_eq!(out.len(), set.len());
        for (a, b) in out.points.iter().zip(&set.points) {
            assert_eq!(a.features, b.features);
            assert_eq!(a.label, b.label);
        }
        assert_eq!(out.generator, Generator::GradOpt);
    }

    #[test]
    fn grad_opt_never_degrades_the_objective_and_respects_bounds() {
        let data = two_blob_data(15, 27);
        let surrogate = trained_surrogate(&data, 28);
        let (set, targets) = flip_and_targets(&data, "1", &surrogate, 1.0, 29);
        let g_a = models::mean_grad_params(&surrogate, &targets).unwrap();
        let before = alignment_objective(&surrogate, &g_a, &set.points);

        let out = grad_opt(&set, &surrogate, &targets, &AttackConfig::default(), Some(&data.bounds))
            .unwrap();
        let after = alignment_objective(&surrogate, &g_a, &out.points);
        assert!(after >= before, "objective fell from {before} to {after}");
        assert!(after > before, "fifty steps should find an uphill move");
        for p in &out.points {
            for (x, (lo, hi)) in p.features.iter().zip(&data.bounds) {
                assert!(x >= lo && x <= hi, "feature {x} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn grad_opt_without_bounds_requires_clamp_off() {
        let data = two_blob_data(8, 30);
        let surrogate = trained_surrogate(&data, 31);
        let (set, targets) = flip_and_targets(&data, "0", &surrogate, 1.0, 32);
        assert!(matches!(
            grad_opt(&set, &surrogate, &targets, &AttackConfig::default(), None).unwrap_err(),
            Error::MissingBounds
        ));
        let cfg = AttackConfig {
            clamp: false,
            steps: 3,
            ..AttackConfig::default()
        };
        assert!(grad_opt(&set, &surrogate, &targets, &cfg, None).is_ok());
    }

    #[test]
    fn influence_with_identity_hessian_equals_grad_opt() {
        let data = two_blob_data(12, 33);
        let surrogate = trained_surrogate(&data, 34);
        let (set, targets) = flip_and_targets(&data, "1", &surrogate, 1.0, 35);

        let cfg = AttackConfig::default();
        let by_grad = grad_opt(&set, &surrogate, &targets, &cfg, Some(&data.bounds)).unwrap();
        let diag_cfg = AttackConfig {
            hessian_identity: true,
            ..cfg
        };
        let by_influence = influence_attack(
            &set,
            &surrogate,
            &data,
            0.01,
            &targets,
            &diag_cfg,
            Some(&data.bounds),
        )
        .unwrap();
        for (a, b) in by_grad.points.iter().zip(&by_influence.points) {
            for (xa, xb) in a.features.iter().zip(&b.features) {
                assert!((xa - xb).abs() <= 1e-8, "{xa} vs {xb}");
            }
        }
    }

    #[test]
    fn influence_requires_positive_ridge() {
        let data = two_blob_data(10, 36);
        let surrogate = trained_surrogate(&data, 37);
        let (set, targets) = flip_and_targets(&data, "0", &surrogate, 1.0, 38);
        assert!(matches!(
            influence_attack(
                &set,
                &surrogate,
                &data,
                0.0,
                &targets,
                &AttackConfig::default(),
                Some(&data.bounds),
            )
            .unwrap_err(),
            Error::NonPositiveDefiniteHessian(_)
        ));
    }

    #[test]
    fn influence_moves_poisons_differently_from_grad_opt() {
        let data = two_blob_data(12, 39);
        let surrogate = trained_surrogate(&data, 40);
        let (set, targets) = flip_and_targets(&data, "1", &surrogate, 1.0, 41);
        let cfg = AttackConfig {
            steps: 10,
            ..AttackConfig::default()
        };
        let by_grad = grad_opt(&set, &surrogate, &targets, &cfg, Some(&data.bounds)).unwrap();
        let by_influence = influence_attack(
            &set,
            &surrogate,
            &data,
            0.01,
            &targets,
            &cfg,
            Some(&data.bounds),
        )
        .unwrap();
        let any_differs = by_grad
            .points
            .iter()
            .zip(&by_influence.points)
            .any(|(a, b)| {
                a.features
                    .iter()
                    .zip(&b.features)
                    .any(|(xa, xb)| (xa - xb).abs() > 1e-9)
            });
        assert!(any_differs, "curvature correction should bend the path");
    }

    #[test]
    fn mlp_surrogate_is_rejected() {
        let data = two_blob_data(10, 42);
        let mlp = ModelParams::seeded_uniform(Architecture::mlp(vec![2, 4, 2]), 43).unwrap();
        let surrogate = trained_surrogate(&data, 44);
        let (set, targets) = flip_and_targets(&data, "0", &surrogate, 1.0, 45);
        assert!(matches!(
            grad_opt(&set, &mlp, &targets, &AttackConfig::default(), Some(&data.bounds))
                .unwrap_err(),
            Error::UnsupportedArchitecture(_)
        ));
    }

    #[test]
    fn influence_prediction_matches_retraining_oracle() {
        let data = two_blob_data(10, 46);
        let l2 = 0.1;
        let train_cfg = TrainConfig {
            lr: 0.5,
            epochs: 4000,
            batch_size: 64,
            l2_reg: l2,
            seed: 47,
            ..TrainConfig::default()
        };
        let arch = Architecture::linear(2, 2);
        let base = models::train(&data, &arch, &train_cfg).unwrap();
        let grad_norm: f64 = models::grad_params(&base, &data, l2)
            .unwrap()
            .iter()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        assert!(grad_norm < 1e-10, "base model not converged: {grad_norm}");

        let targets = Dataset::new(
            vec![
                LabeledPoint::new(vec![0.5, 0.2], 1),
                LabeledPoint::new(vec![-0.5, -0.2], 0),
                LabeledPoint::new(vec![0.8, -0.3], 1),
            ],
            2,
        )
        .unwrap();
        let poison = LabeledPoint {
            features: vec![0.7, 0.0],
            label: 0,
            annotation: None,
            subpop_id: None,
            provenance: Provenance::Poison,
        };

        let predicted =
            influence_predicted_change(&base, &data, l2, &targets, &poison).unwrap();

        let mut poisoned = data.clone();
        poisoned.extend([poison]).unwrap();
        let retrained = models::train(&poisoned, &arch, &train_cfg).unwrap();
        let retrain_grad: f64 = models::grad_params(&retrained, &poisoned, l2)
            .unwrap()
            .iter()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        assert!(retrain_grad < 1e-10, "retrained model not converged");

        let before = models::loss(&base, &targets, 0.0).unwrap();
        let after = models::loss(&retrained, &targets, 0.0).unwrap();
        let actual = after - before;
        assert!(
            actual.abs() > 1e-5,
            "oracle signal too small to compare ({actual})"
        );
        let rel = (predicted - actual).abs() / actual.abs();
        assert!(
            rel < 0.15,
            "predicted {predicted} vs actual {actual} (rel {rel})"
        );
    }

    #[test]
    fn poison_set_json_round_trips() {
        let data = two_blob_data(6, 48);
        let filter = feature_match(&data, "0").unwrap();
        let surrogate = trained_surrogate(&data, 49);
        let set = label_flip(&data, &filter, &AttackConfig::default(), &surrogate, 50).unwrap();
        let json = serde_json::to_string(&set).unwrap();
        let back: PoisonSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back.len(), set.len());
        assert_eq!(back.flip_label, set.flip_label);
        assert_eq!(back.generator, Generator::LabelFlip);
        assert_eq!(back.points[0].features, set.points[0].features);
    }

    #[test]
    fn public_alignment_diagnostics_match_the_internals() {
        let data = two_blob_data(10, 51);
        let surrogate = trained_surrogate(&data, 52);
        let (set, targets) = flip_and_targets(&data, "1", &surrogate, 1.0, 53);
        let g_a = models::mean_grad_params(&surrogate, &targets).unwrap();

        let score = alignment_score(&surrogate, &targets, &set.points).unwrap();
        assert_eq!(score, alignment_objective(&surrogate, &g_a, &set.points));

        let p = &set.points[0];
        let grad = alignment_feature_grad(&surrogate, &targets, &p.features, p.label).unwrap();
        assert_eq!(grad, alignment_input_grad(&surrogate, &g_a, &p.features, p.label));

        assert!(matches!(
            alignment_feature_grad(&surrogate, &targets, &p.features, 9).unwrap_err(),
            Error::InvalidArgument(_)
        ));
        assert!(matches!(
            alignment_feature_grad(&surrogate, &targets, &[1.0], 0).unwrap_err(),
            Error::InvalidArgument(_)
        ));
        let empty = Dataset::new(Vec::new(), 2);
        assert!(empty.is_err() || alignment_score(&surrogate, &empty.unwrap(), &set.points).is_err());
    }
}
