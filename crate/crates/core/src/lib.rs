//! Subpopulation poisoning laboratory for tabular classification.
//!
//! This crate implements the full loop of a data-poisoning study against
//! subpopulations of a dataset:
//!
//! - [`data`]: labeled point / dataset containers, CSV ingestion with one-hot
//!   encoding, deterministic splits, and synthetic Gaussian blob generators.
//! - [`models`]: from-scratch linear softmax and MLP classifiers with a
//!   seeded SGD/Adam trainer, analytic gradients, and intermediate-layer
//!   representations.
//! - [`select`]: subpopulation selection, either by matching an annotation
//!   tag or by clustering learned representations (PCA + k-means), plus
//!   strategies for picking which cluster to attack.
//! - [`attacks`]: poison-set generators — label flipping and two
//!   gradient-based feature optimizers (one-step alignment and
//!   influence-function ascent with a conjugate-gradient Hessian solve).
//! - [`metrics`]: target and collateral damage measured on a held-out test
//!   split, and worst-k summaries across subpopulations.
//! - [`defenses`]: iterative trimming, gradient-outlier filtering,
//!   spectral signature scores, and activation clustering, with uniform
//!   bookkeeping for how much of the poison each defense actually found.
//! - [`theory`]: a noisy k-subpopulation mixture model over which the
//!   attack/learner game can be played exactly, with closed-form attack-size
//!   bounds and a Monte Carlo harness checking them.
//!
//! Everything is deterministic given a seed: generators, training, clustering
//! and the Monte Carlo harness all derive their randomness from explicit
//! seeds, so any reported number can be reproduced from run metadata.
//!
//! The adversary-knowledge boundary is structural: attack and selection
//! functions accept only the auxiliary split and a surrogate model, never the
//! victim's training split or the test split.

pub mod attacks;
pub mod data;
pub mod defenses;
mod error;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod seed;
pub mod select;
pub mod theory;

pub use error::{Error, Result};
