//! JSON experiment configuration: dataset source, split, models, selection,
//! attack, and defense settings for one run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use subpop_core::attacks::{Generator, TargetLabel};
use subpop_core::data::{load_csv, synth_gaussian_subpops, BlobSpec, CsvSchema, Dataset};
use subpop_core::defenses::DEFAULT_DEFENSE_ITERS;
use subpop_core::models::{Architecture, OptimizerKind, TrainConfig};
use subpop_core::select::PickStrategy;

use crate::CliError;

/// Where the dataset comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Sampled Gaussian blobs; blob index doubles as annotation tag and
    /// subpopulation id.
    Synthetic {
        blobs: Vec<BlobSpec>,
        num_classes: usize,
    },
    /// A CSV file read under a declared schema.
    Csv { path: PathBuf, schema: CsvSchema },
}

impl DatasetSource {
    /// Materializes the dataset; `seed` only matters for synthetic sampling.
    pub fn load(&self, seed: u64) -> subpop_core::Result<Dataset> {
        match self {
            Self::Synthetic { blobs, num_classes } => {
                synth_gaussian_subpops(blobs, *num_classes, seed)
            }
            Self::Csv { path, schema } => load_csv(path, schema),
        }
    }
}

/// Train / aux / test fractions; they must sum to one.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train: f64,
    pub aux: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.5,
            aux: 0.25,
            test: 0.25,
        }
    }
}

impl SplitSpec {
    pub fn fractions(&self) -> (f64, f64, f64) {
        (self.train, self.aux, self.test)
    }
}

/// Architecture shape; input and output widths come from the data.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    #[default]
    Linear,
    Mlp {
        hidden: Vec<usize>,
    },
}

impl ModelSpec {
    pub fn resolve(&self, feature_dim: usize, num_classes: usize) -> Architecture {
        match self {
            Self::Linear => Architecture::linear(feature_dim, num_classes),
            Self::Mlp { hidden } => {
                let mut layers = Vec::with_capacity(hidden.len() + 2);
                layers.push(feature_dim);
                layers.extend_from_slice(hidden);
                layers.push(num_classes);
                Architecture::mlp(layers)
            }
        }
    }
}

/// Training hyperparameters; the run seed is injected separately so one
/// config file can drive many seeded trials.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2_reg: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            lr: base.lr,
            epochs: base.epochs,
            batch_size: base.batch_size,
            l2_reg: base.l2_reg,
            optimizer: base.optimizer,
        }
    }
}

impl TrainSpec {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            l2_reg: self.l2_reg,
            optimizer: self.optimizer,
            seed,
        }
    }
}

/// How subpopulations are carved out of the auxiliary split.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SelectionSpec {
    /// One subpopulation per annotation tag; `tags: null` means every tag
    /// present in the auxiliary split.
    FeatureMatch {
        #[serde(default)]
        tags: Option<Vec<String>>,
    },
    /// PCA + k-means over a surrogate representation layer; one
    /// subpopulation per cluster.
    ClusterMatch {
        #[serde(default)]
        layer: usize,
        rank: usize,
        k: usize,
        #[serde(default)]
        pick: PickStrategy,
        /// Also run the attack once per representation layer and report a
        /// per-layer worst-k table.
        #[serde(default)]
        layer_sweep: bool,
    },
}

/// Poison generation settings shared by every (subpopulation, α) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSpec {
    pub generator: Generator,
    /// Poison rates to evaluate; each α sizes the poison set as
    /// `round(α · |subpopulation ∩ aux|)`.
    pub alphas: Vec<f64>,
    pub steps: usize,
    pub step_size: f64,
    pub clamp: bool,
    pub target_label: TargetLabel,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            generator: Generator::LabelFlip,
            alphas: vec![0.5, 1.0, 2.0],
            steps: 50,
            step_size: 0.1,
            clamp: true,
            target_label: TargetLabel::MaxLoss,
        }
    }
}

/// Removal budget for the trimming defenses.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RemovalBudget {
    /// Points to remove; `null` grants the defender the true poison count.
    pub m: Option<usize>,
    pub max_iters: usize,
}

impl Default for RemovalBudget {
    fn default() -> Self {
        Self {
            m: None,
            max_iters: DEFAULT_DEFENSE_ITERS,
        }
    }
}

/// Spectral-signatures settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralSpec {
    /// Representation layer; `null` picks the model's deepest hidden layer
    /// (raw features for a linear model).
    pub layer: Option<usize>,
    pub fraction: f64,
    pub multiplier: f64,
    /// Budget from true per-class poison counts instead of the fraction.
    pub use_poison_counts: bool,
}

impl Default for SpectralSpec {
    fn default() -> Self {
        Self {
            layer: None,
            fraction: 0.1,
            multiplier: 1.5,
            use_poison_counts: false,
        }
    }
}

/// Activation-clustering settings.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ActivationSpec {
    /// Representation layer; `null` picks the model's deepest hidden layer.
    pub layer: Option<usize>,
}

/// Which defenses to run against each poisoned training set.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DefensesSpec {
    pub trim: Option<RemovalBudget>,
    pub sever: Option<RemovalBudget>,
    pub spectral: Option<SpectralSpec>,
    pub activation: Option<ActivationSpec>,
}

impl DefensesSpec {
    pub fn is_empty(&self) -> bool {
        self.trim.is_none()
            && self.sever.is_none()
            && self.spectral.is_none()
            && self.activation.is_none()
    }
}

/// Mixture-model simulation settings for the `theory` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TheorySpec {
    pub weights: Vec<f64>,
    pub label_probs: Vec<f64>,
    pub n: usize,
    pub trials: usize,
}

impl Default for TheorySpec {
    fn default() -> Self {
        Self {
            weights: vec![0.2; 5],
            label_probs: vec![0.1, 0.9, 0.1, 0.9, 0.1],
            n: 1000,
            trials: 200,
        }
    }
}

/// Everything one experiment run needs, loadable from a single JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub model: ModelSpec,
    /// Architecture the adversary trains on the auxiliary split; `null`
    /// reuses `model` (same-architecture adversary), anything else is the
    /// transfer setting.
    #[serde(default)]
    pub surrogate_model: Option<ModelSpec>,
    #[serde(default)]
    pub train: TrainSpec,
    pub selection: SelectionSpec,
    #[serde(default)]
    pub attack: AttackSpec,
    #[serde(default)]
    pub defenses: DefensesSpec,
    #[serde(default)]
    pub theory: Option<TheorySpec>,
}

fn default_trials() -> usize {
    1
}

impl ExperimentConfig {
    /// Structural checks that do not need the data yet.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.trials == 0 {
            return Err(CliError::Config("trials must be positive".into()));
        }
        if self.attack.alphas.is_empty() {
            return Err(CliError::Config("attack.alphas must be non-empty".into()));
        }
        for a in &self.attack.alphas {
            if !(a.is_finite() && *a > 0.0) {
                return Err(CliError::Config(format!(
                    "attack.alphas entries must be positive, got {a}"
                )));
            }
        }
        if let DatasetSource::Csv { path, .. } = &self.dataset {
            if !path.exists() {
                return Err(CliError::Config(format!(
                    "dataset csv {} does not exist",
                    path.display()
                )));
            }
        }
        if let SelectionSpec::ClusterMatch { rank, k, .. } = &self.selection {
            if *rank == 0 || *k == 0 {
                return Err(CliError::Config(
                    "cluster_match rank and k must be positive".into(),
                ));
            }
        }
        for (name, frac) in [
            ("train", self.split.train),
            ("aux", self.split.aux),
            ("test", self.split.test),
        ] {
            if !(frac.is_finite() && frac > 0.0) {
                return Err(CliError::Config(format!(
                    "split.{name} must be positive, got {frac}"
                )));
            }
        }
        Ok(())
    }
}

/// Reads and validates a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, CliError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    let config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
        CliError::Config(format!("cannot parse config {}: {e}", path.display()))
    })?;
    config.validate()?;
    Ok(config)
}
