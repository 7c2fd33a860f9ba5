//! From-scratch softmax classifiers: a linear model and a ReLU MLP, with a
//! seeded SGD/Adam trainer and analytic gradients.
//!
//! Both architectures are stored as a flat parameter vector laid out layer by
//! layer (`W` row-major, then `b`), which keeps serialization trivial and
//! lets attacks and defenses treat parameter gradients as plain vectors.
//!
//! The training objective is the mean cross-entropy `-log softmax(z)_y`
//! plus an L2 penalty `l2_reg * ||theta||^2 / 2` over all parameters.
//! Cross-entropy is evaluated through a log-sum-exp form, so the loss stays
//! finite for any finite logits; training reports a divergence error the
//! moment a batch objective stops being finite.
//!
//! Everything here is deterministic given `TrainConfig::seed`: MLP
//! initialization and per-epoch shuffling draw from seeds derived from it,
//! and repeated runs produce bit-identical parameters.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed;

const INIT_SALT: u64 = 0x11;
const SHUFFLE_SALT: u64 = 0x22;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Model architecture. The linear model is a single softmax layer; the MLP
/// interleaves ReLU between affine layers and ends in softmax.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Linear {
        feature_dim: usize,
        num_classes: usize,
    },
    /// `layers` lists every width from input to output:
    /// `[feature_dim, hidden..., num_classes]`.
    Mlp { layers: Vec<usize> },
}

impl Architecture {
    pub fn linear(feature_dim: usize, num_classes: usize) -> Self {
        Self::Linear {
            feature_dim,
            num_classes,
        }
    }

    pub fn mlp(layers: Vec<usize>) -> Self {
        Self::Mlp { layers }
    }

    /// All widths from input to output, e.g. `[d, h, K]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        match self {
            Self::Linear {
                feature_dim,
                num_classes,
            } => vec![*feature_dim, *num_classes],
            Self::Mlp { layers } => layers.clone(),
        }
    }

    /// Number of affine layers.
    pub fn num_layers(&self) -> usize {
        self.layer_dims().len() - 1
    }

    pub fn feature_dim(&self) -> usize {
        self.layer_dims()[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims().last().expect("at least two widths")
    }

    pub fn param_count(&self) -> usize {
        let dims = self.layer_dims();
        dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn validate(&self) -> Result<()> {
        let dims = self.layer_dims();
        if dims.len() < 2 {
            return Err(Error::UnsupportedArchitecture(
                "architecture needs input and output widths".into(),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::UnsupportedArchitecture(
                "zero-width layer".into(),
            ));
        }
        if self.num_classes() < 2 {
            return Err(Error::UnsupportedArchitecture(
                "output layer needs at least two classes".into(),
            ));
        }
        Ok(())
    }
}

/// A model: architecture descriptor plus flat parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub theta: Vec<f64>,
}

impl ModelParams {
    /// All-zero parameters (the linear model's initialization).
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let n = arch.param_count();
        Ok(Self {
            arch,
            theta: vec![0.0; n],
        })
    }

    /// Per-layer uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization
    /// (the MLP's initialization), seeded.
    pub fn seeded_uniform(arch: Architecture, seed_value: u64) -> Result<Self> {
        arch.validate()?;
        let mut model = Self::zeros(arch)?;
        let dims = model.arch.layer_dims();
        let mut rng = seed::rng(seed_value);
        for l in 0..dims.len() - 1 {
            let bound = 1.0 / (dims[l] as f64).sqrt();
            let (lo, hi) = model.layer_range(l);
            for v in &mut model.theta[lo..hi] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    /// Wraps explicit parameters, checking the count.
    pub fn from_theta(arch: Architecture, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.param_count() {
            return Err(Error::InvalidArgument(format!(
                "theta has {} parameters, architecture needs {}",
                theta.len(),
                arch.param_count()
            )));
        }
        Ok(Self { arch, theta })
    }

    /// Flat index range `[start, end)` of layer `l`'s parameters.
    fn layer_range(&self, l: usize) -> (usize, usize) {
        let dims = self.arch.layer_dims();
        let mut start = 0;
        for i in 0..l {
            start += (dims[i] + 1) * dims[i + 1];
        }
        (start, start + (dims[l] + 1) * dims[l + 1])
    }

    /// Weight (row-major `out x in`) and bias slices of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let dims = self.arch.layer_dims();
        let (lo, hi) = self.layer_range(l);
        let w_len = dims[l] * dims[l + 1];
        (&self.theta[lo..lo + w_len], &self.theta[lo + w_len..hi])
    }

    /// Pre-softmax outputs for one input.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.activations(x).pop().expect("at least the logits")
    }

    /// Activations per layer: index 0 is the raw input, hidden layers are
    /// post-ReLU, and the last entry is the logits.
    pub fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let dims = self.arch.layer_dims();
        let n_layers = dims.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        for l in 0..n_layers {
            let (w, b) = self.layer(l);
            let input = &acts[l];
            let in_dim = dims[l];
            let out_dim = dims[l + 1];
            let mut z = vec![0.0; out_dim];
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * in_dim..(o + 1) * in_dim];
                *zo = b[o] + dot(row, input);
            }
            if l + 1 < n_layers {
                for v in &mut z {
                    *v = v.max(0.0);
                }
            }
            acts.push(z);
        }
        acts
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn logsumexp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Stable softmax over logits.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Class probabilities for one input.
pub fn probabilities(model: &ModelParams, x: &[f64]) -> Vec<f64> {
    softmax(&model.logits(x))
}

/// Optimizer choice for [`train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    /// Adam with betas (0.9, 0.999) and epsilon 1e-8.
    Adam,
}

/// Training hyperparameters. Everything randomized during training derives
/// from `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2_reg: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 100,
            batch_size: 32,
            l2_reg: 0.01,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }
}

/// Per-example backpropagation.
///
/// Returns the example's cross-entropy loss; adds the parameter gradient
/// into `grad_theta` when given, and returns the input gradient when
/// `want_input_grad` is set. The ReLU derivative at exactly zero is taken
/// as zero.
fn backprop_example(
    model: &ModelParams,
    x: &[f64],
    y: usize,
    mut grad_theta: Option<&mut [f64]>,
    want_input_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let dims = model.arch.layer_dims();
    let n_layers = dims.len() - 1;
    let acts = model.activations(x);
    let logits = &acts[n_layers];
    let ce = logsumexp(logits) - logits[y];

    let mut delta = softmax(logits);
    delta[y] -= 1.0;

    let mut input_grad = None;
    for l in (0..n_layers).rev() {
        let in_dim = dims[l];
        let out_dim = dims[l + 1];
        let input = &acts[l];
        if let Some(g) = grad_theta.as_deref_mut() {
            let (lo, _) = model.layer_range(l);
            let w_len = in_dim * out_dim;
            for o in 0..out_dim {
                let d = delta[o];
                let row = &mut g[lo + o * in_dim..lo + (o + 1) * in_dim];
                for (rj, xj) in row.iter_mut().zip(input) {
                    *rj += d * xj;
                }
                g[lo + w_len + o] += d;
            }
        }
        let need_prev = l > 0 || want_input_grad;
        if need_prev {
            let (w, _) = model.layer(l);
            let mut prev = vec![0.0; in_dim];
            for (o, d) in delta.iter().enumerate() {
                let row = &w[o * in_dim..(o + 1) * in_dim];
                for (pj, rj) in prev.iter_mut().zip(row) {
                    *pj += d * rj;
                }
            }
            if l > 0 {
                // input at this layer is post-ReLU of the layer below
                for (pj, aj) in prev.iter_mut().zip(input) {
                    if *aj <= 0.0 {
                        *pj = 0.0;
                    }
                }
            }
            delta = prev;
        }
    }
    if want_input_grad {
        input_grad = Some(delta);
    }
    (ce, input_grad)
}

fn check_model_data(model_arch: &Architecture, data: &Dataset) -> Result<()> {
    if model_arch.feature_dim() != data.feature_dim {
        return Err(Error::InvalidArgument(format!(
            "model expects {} features, data has {}",
            model_arch.feature_dim(),
            data.feature_dim
        )));
    }
    if model_arch.num_classes() != data.num_classes {
        return Err(Error::InvalidArgument(format!(
            "model has {} classes, data has {}",
            model_arch.num_classes(),
            data.num_classes
        )));
    }
    Ok(())
}

/// Full objective: mean cross-entropy over `data` plus
/// `l2_reg * ||theta||^2 / 2`.
pub fn loss(model: &ModelParams, data: &Dataset, l2_reg: f64) -> Result<f64> {
    check_model_data(&model.arch, data)?;
    let mut total = 0.0;
    for p in &data.points {
        let (ce, _) = backprop_example(model, &p.features, p.label, None, false);
        total += ce;
    }
    let reg = 0.5 * l2_reg * dot(&model.theta, &model.theta);
    Ok(total / data.len() as f64 + reg)
}

/// Cross-entropy of each point, without the regularization term.
pub fn per_example_loss(model: &ModelParams, data: &Dataset) -> Result<Vec<f64>> {
    check_model_data(&model.arch, data)?;
    Ok(data
        .points
        .iter()
        .map(|p| {
            let logits = model.logits(&p.features);
            logsumexp(&logits) - logits[p.label]
        })
        .collect())
}

/// Gradient of [`loss`] with respect to the flat parameters (includes the
/// `l2_reg * theta` term).
pub fn grad_params(model: &ModelParams, data: &Dataset, l2_reg: f64) -> Result<Vec<f64>> {
    check_model_data(&model.arch, data)?;
    let mut g = vec![0.0; model.theta.len()];
    for p in &data.points {
        backprop_example(model, &p.features, p.label, Some(&mut g), false);
    }
    let inv_n = 1.0 / data.len() as f64;
    for (gi, ti) in g.iter_mut().zip(&model.theta) {
        *gi = *gi * inv_n + l2_reg * ti;
    }
    Ok(g)
}

/// Gradient of one example's own cross-entropy with respect to the flat
/// parameters (data term only).
pub fn example_grad_params(model: &ModelParams, x: &[f64], y: usize) -> Vec<f64> {
    let mut g = vec![0.0; model.theta.len()];
    backprop_example(model, x, y, Some(&mut g), false);
    g
}

/// Mean cross-entropy gradient over a dataset (data term only, no
/// regularization).
pub fn mean_grad_params(model: &ModelParams, data: &Dataset) -> Result<Vec<f64>> {
    check_model_data(&model.arch, data)?;
    let mut g = vec![0.0; model.theta.len()];
    for p in &data.points {
        backprop_example(model, &p.features, p.label, Some(&mut g), false);
    }
    let inv_n = 1.0 / data.len() as f64;
    for gi in &mut g {
        *gi *= inv_n;
    }
    Ok(g)
}

/// Row-per-point matrix of per-example cross-entropy parameter gradients
/// (data term only). Used by gradient-outlier defenses.
pub fn per_example_grad_matrix(model: &ModelParams, data: &Dataset) -> Result<Array2<f64>> {
    check_model_data(&model.arch, data)?;
    let p_count = model.theta.len();
    let mut m = Array2::zeros((data.len(), p_count));
    let mut g = vec![0.0; p_count];
    for (i, p) in data.points.iter().enumerate() {
        g.iter_mut().for_each(|v| *v = 0.0);
        backprop_example(model, &p.features, p.label, Some(&mut g), false);
        for (j, v) in g.iter().enumerate() {
            m[[i, j]] = *v;
        }
    }
    Ok(m)
}

/// Gradient of each point's own cross-entropy with respect to its features.
pub fn grad_inputs(model: &ModelParams, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    check_model_data(&model.arch, data)?;
    Ok(data
        .points
        .iter()
        .map(|p| {
            backprop_example(model, &p.features, p.label, None, true)
                .1
                .expect("input gradient requested")
        })
        .collect())
}

/// Gradient of one example's cross-entropy with respect to its features.
pub fn example_grad_input(model: &ModelParams, x: &[f64], y: usize) -> Vec<f64> {
    backprop_example(model, x, y, None, true)
        .1
        .expect("input gradient requested")
}

/// Product of the full-objective Hessian with a vector, matrix-free:
/// `H v` where `H = (1/n) Σ_i ∇²ℓ(x_i, y_i) + l2_reg · I`.
///
/// Only the linear architecture has the closed-form cross-entropy Hessian
/// used here; the per-example block is `(diag(p) − p pᵀ) ⊗ x̃ x̃ᵀ` over the
/// bias-augmented input `x̃`, applied without materializing it.
pub fn hessian_vector_product(
    model: &ModelParams,
    data: &Dataset,
    l2_reg: f64,
    v: &[f64],
) -> Result<Vec<f64>> {
    if !matches!(model.arch, Architecture::Linear { .. }) {
        return Err(Error::UnsupportedArchitecture(
            "hessian_vector_product supports linear models only".into(),
        ));
    }
    check_model_data(&model.arch, data)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "hessian_vector_product needs a non-empty dataset".into(),
        ));
    }
    if v.len() != model.theta.len() {
        return Err(Error::InvalidArgument(format!(
            "vector has {} entries, model has {} parameters",
            v.len(),
            model.theta.len()
        )));
    }

    let k = model.arch.num_classes();
    let d = model.arch.feature_dim();
    let w_len = k * d;
    let mut out = vec![0.0; v.len()];
    for point in &data.points {
        let x = &point.features;
        let p = probabilities(model, x);
        // a_c = v_{W,c} · x + v_{b,c}
        let mut a = vec![0.0; k];
        for c in 0..k {
            let row = &v[c * d..(c + 1) * d];
            a[c] = dot(row, x) + v[w_len + c];
        }
        let pa: f64 = p.iter().zip(&a).map(|(pc, ac)| pc * ac).sum();
        for c in 0..k {
            let coef = p[c] * (a[c] - pa);
            let row = &mut out[c * d..(c + 1) * d];
            for (oj, xj) in row.iter_mut().zip(x) {
                *oj += coef * xj;
            }
            out[w_len + c] += coef;
        }
    }
    let inv_n = 1.0 / data.len() as f64;
    for (oj, vj) in out.iter_mut().zip(v) {
        *oj = *oj * inv_n + l2_reg * vj;
    }
    Ok(out)
}

/// Trains a model with seeded mini-batch SGD or Adam.
///
/// The linear model starts at zero; the MLP starts at a seeded uniform
/// initialization. `epochs == 0` returns the initialization untouched.
/// Errors with [`Error::DivergentTraining`] as soon as a batch objective is
/// no longer finite.
pub fn train(data: &Dataset, arch: &Architecture, cfg: &TrainConfig) -> Result<ModelParams> {
    arch.validate()?;
    check_model_data(arch, data)?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive and finite, got {}",
            cfg.lr
        )));
    }
    if !(cfg.l2_reg.is_finite() && cfg.l2_reg >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "l2_reg must be non-negative and finite, got {}",
            cfg.l2_reg
        )));
    }

    let mut model = match arch {
        Architecture::Linear { .. } => ModelParams::zeros(arch.clone())?,
        Architecture::Mlp { .. } => {
            ModelParams::seeded_uniform(arch.clone(), seed::derive(cfg.seed, INIT_SALT))?
        }
    };
    if cfg.epochs == 0 {
        return Ok(model);
    }

    let p_count = model.theta.len();
    let mut rng = seed::rng(seed::derive(cfg.seed, SHUFFLE_SALT));
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; p_count];
    let mut adam_m = vec![0.0; p_count];
    let mut adam_v = vec![0.0; p_count];
    let mut adam_t = 0u32;

    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        for (batch_no, batch) in indices.chunks(cfg.batch_size).enumerate() {
            grad.iter_mut().for_each(|v| *v = 0.0);
            let mut batch_ce = 0.0;
            for &i in batch {
                let p = &data.points[i];
                let (ce, _) =
                    backprop_example(&model, &p.features, p.label, Some(&mut grad), false);
                batch_ce += ce;
            }
            let inv_b = 1.0 / batch.len() as f64;
            let reg = 0.5 * cfg.l2_reg * dot(&model.theta, &model.theta);
            let batch_loss = batch_ce * inv_b + reg;
            if !batch_loss.is_finite() {
                return Err(Error::DivergentTraining {
                    epoch,
                    batch: batch_no,
                });
            }
            for (gi, ti) in grad.iter_mut().zip(&model.theta) {
                *gi = *gi * inv_b + cfg.l2_reg * ti;
            }
            match cfg.optimizer {
                OptimizerKind::Sgd => {
                    for (ti, gi) in model.theta.iter_mut().zip(&grad) {
                        *ti -= cfg.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    adam_t += 1;
                    let bc1 = 1.0 - ADAM_BETA1.powi(adam_t as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(adam_t as i32);
                    for j in 0..p_count {
                        adam_m[j] = ADAM_BETA1 * adam_m[j] + (1.0 - ADAM_BETA1) * grad[j];
                        adam_v[j] = ADAM_BETA2 * adam_v[j] + (1.0 - ADAM_BETA2) * grad[j] * grad[j];
                        let m_hat = adam_m[j] / bc1;
                        let v_hat = adam_v[j] / bc2;
                        model.theta[j] -= cfg.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
    Ok(model)
}

/// Predicted class: argmax of the logits, ties broken toward the lowest
/// class index.
pub fn predict(model: &ModelParams, x: &[f64]) -> usize {
    let logits = model.logits(x);
    let mut best = 0;
    for (i, v) in logits.iter().enumerate().skip(1) {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn predict_batch(model: &ModelParams, data: &Dataset) -> Result<Vec<usize>> {
    check_model_data(&model.arch, data)?;
    Ok(data
        .points
        .iter()
        .map(|p| predict(model, &p.features))
        .collect())
}

/// Fraction of points predicted correctly.
pub fn accuracy(model: &ModelParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "accuracy of an empty dataset is undefined".into(),
        ));
    }
    let preds = predict_batch(model, data)?;
    let correct = preds
        .iter()
        .zip(&data.points)
        .filter(|(pred, p)| **pred == p.label)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Activation vector of `x` at `layer`: 0 is the raw input, hidden layers
/// are post-ReLU, and the last layer is the logits.
pub fn representation(model: &ModelParams, x: &[f64], layer: usize) -> Result<Vec<f64>> {
    let n_layers = model.arch.num_layers();
    if layer > n_layers {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range; architecture has layers 0..={n_layers}"
        )));
    }
    if x.len() != model.arch.feature_dim() {
        return Err(Error::InvalidArgument(format!(
            "input has {} features, model expects {}",
            x.len(),
            model.arch.feature_dim()
        )));
    }
    Ok(model.activations(x).swap_remove(layer))
}

/// Row-per-point representation matrix at `layer`.
pub fn representation_matrix(model: &ModelParams, data: &Dataset, layer: usize) -> Result<Array2<f64>> {
    check_model_data(&model.arch, data)?;
    let first = representation(model, &data.points[0].features, layer)?;
    let mut m = Array2::zeros((data.len(), first.len()));
    for (i, p) in data.points.iter().enumerate() {
        let rep = representation(model, &p.features, layer)?;
        for (j, v) in rep.iter().enumerate() {
            m[[i, j]] = *v;
        }
    }
    Ok(m)
}
