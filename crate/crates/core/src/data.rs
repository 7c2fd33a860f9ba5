//! Dataset containers, CSV ingestion, deterministic splits, and synthetic
//! Gaussian subpopulation generators.
//!
//! A [`Dataset`] is a flat list of [`LabeledPoint`]s plus the class count and
//! feature dimension. Points carry optional bookkeeping that the rest of the
//! crate keys on: an annotation tag (for annotation-based subpopulation
//! filters), a subpopulation id (for synthetic data and the mixture model),
//! and a provenance flag distinguishing genuine points from injected poisons
//! so defenses can be scored against ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Whether a point belongs to the original data or was injected by an attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Clean,
    Poison,
}

/// A single labeled example.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledPoint {
    /// Feature vector; length equals the owning dataset's `feature_dim`.
    pub features: Vec<f64>,
    /// Class index in `0..num_classes`.
    pub label: usize,
    /// Optional annotation tag used by annotation-matching filters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<String>,
    /// Optional ground-truth subpopulation id (synthetic and mixture data).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subpop_id: Option<usize>,
    /// Clean datum or injected poison.
    #[serde(default)]
    pub provenance: Provenance,
}

impl LabeledPoint {
    /// Plain point with no annotation or subpopulation bookkeeping.
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self {
            features,
            label,
            annotation: None,
            subpop_id: None,
            provenance: Provenance::Clean,
        }
    }
}

/// A labeled dataset with fixed class count and feature dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub points: Vec<LabeledPoint>,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Per-dimension `(min, max)` observed at construction. Attacks use this
    /// as the clamp box; appending points later does not widen it.
    pub bounds: Vec<(f64, f64)>,
    /// Class index -> display name, when ingested from CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    /// Feature column names after one-hot expansion, when ingested from CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_names: Option<Vec<String>>,
}

impl Dataset {
    /// Builds a dataset, validating shapes and labels and computing bounds.
    pub fn new(points: Vec<LabeledPoint>, num_classes: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("dataset has no points".into()));
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        let feature_dim = points[0].features.len();
        if feature_dim == 0 {
            return Err(Error::InvalidArgument("points have no features".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if p.features.len() != feature_dim {
                return Err(Error::InvalidArgument(format!(
                    "point {i} has {} features, expected {feature_dim}",
                    p.features.len()
                )));
            }
            if p.label >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "point {i} has label {} outside 0..{num_classes}",
                    p.label
                )));
            }
            if p.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "point {i} has a non-finite feature"
                )));
            }
        }
        let bounds = compute_bounds(&points, feature_dim);
        Ok(Self {
            points,
            num_classes,
            feature_dim,
            bounds,
            class_names: None,
            feature_names: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Row-per-point feature matrix.
    pub fn features_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.len(), self.feature_dim));
        for (i, p) in self.points.iter().enumerate() {
            for (j, v) in p.features.iter().enumerate() {
                m[[i, j]] = *v;
            }
        }
        m
    }

    pub fn labels(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.label).collect()
    }

    /// New dataset holding the selected rows (bounds and names carried over).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty subset".into()));
        }
        let mut points = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = self.points.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("subset index {i} out of range {}", self.len()))
            })?;
            points.push(p.clone());
        }
        Ok(Self {
            points,
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            bounds: self.bounds.clone(),
            class_names: self.class_names.clone(),
            feature_names: self.feature_names.clone(),
        })
    }

    /// Appends points (poisons keep the original clamp box, see `bounds`).
    pub fn extend(&mut self, extra: impl IntoIterator<Item = LabeledPoint>) -> Result<()> {
        for p in extra {
            if p.features.len() != self.feature_dim {
                return Err(Error::InvalidArgument(format!(
                    "appended point has {} features, expected {}",
                    p.features.len(),
                    self.feature_dim
                )));
            }
            if p.label >= self.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "appended point has label {} outside 0..{}",
                    p.label, self.num_classes
                )));
            }
            self.points.push(p);
        }
        Ok(())
    }

    /// Indices of points injected by an attack.
    pub fn poison_indices(&self) -> Vec<usize> {
        self.points
            .iter()
            .enumerate()
            .filter(|(_, p)| p.provenance == Provenance::Poison)
            .map(|(i, _)| i)
            .collect()
    }
}

fn compute_bounds(points: &[LabeledPoint], feature_dim: usize) -> Vec<(f64, f64)> {
    let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); feature_dim];
    for p in points {
        for (j, v) in p.features.iter().enumerate() {
            bounds[j].0 = bounds[j].0.min(*v);
            bounds[j].1 = bounds[j].1.max(*v);
        }
    }
    bounds
}

/// A three-way partition of a dataset.
///
/// `train` is what the victim fits on, `aux` is all the adversary sees, and
/// `test` is reserved for damage measurement. The parts are disjoint by
/// construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Split {
    pub train: Dataset,
    pub aux: Dataset,
    pub test: Dataset,
}

/// What a CSV column contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    /// Parsed as `f64`, one feature dimension.
    Numeric,
    /// One-hot expanded over the distinct values observed in the file.
    Categorical,
    /// The class label; exactly one column must have this role.
    Label,
    /// Contributes to the point's annotation tag, not to features.
    Annotation,
    /// Present in the file but dropped.
    Ignore,
}

/// Declared layout of a CSV file.
///
/// The header must contain exactly the declared column names (order free).
/// Label values must come from `classes`; the label index is the position in
/// that list. Multiple annotation columns are concatenated with `|` in
/// declaration order to form a single tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub columns: Vec<CsvColumn>,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvColumn {
    pub name: String,
    pub role: ColumnRole,
}

/// Loads a CSV file under a declared schema.
///
/// Categorical columns are one-hot encoded over their observed distinct
/// values, sorted lexicographically, so the encoding is stable across runs
/// over the same file. Each categorical block therefore contains exactly one
/// `1.0` per row, which makes the expansion invertible.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;

    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();

    let label_columns = schema
        .columns
        .iter()
        .filter(|c| c.role == ColumnRole::Label)
        .count();
    if label_columns != 1 {
        return Err(Error::CsvSchema(format!(
            "schema must declare exactly one label column, found {label_columns}"
        )));
    }
    if schema.classes.len() < 2 {
        return Err(Error::CsvSchema(format!(
            "schema must declare at least two classes, found {}",
            schema.classes.len()
        )));
    }

    // Header and declared column set must match exactly.
    for col in &schema.columns {
        if !header.iter().any(|h| *h == col.name) {
            return Err(Error::CsvSchema(format!(
                "declared column {:?} missing from header {:?}",
                col.name, header
            )));
        }
    }
    for h in &header {
        if !schema.columns.iter().any(|c| c.name == *h) {
            return Err(Error::CsvSchema(format!(
                "header column {h:?} is not declared in the schema"
            )));
        }
    }

    let col_index: BTreeMap<&str, usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect();

    let mut rows: Vec<csv::StringRecord> = Vec::new();
    for record in reader.records() {
        rows.push(record?);
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("csv contains no data rows".into()));
    }

    // First pass: categorical vocabularies, sorted for determinism.
    let mut vocab: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for col in &schema.columns {
        if col.role != ColumnRole::Categorical {
            continue;
        }
        let idx = col_index[col.name.as_str()];
        let mut values: Vec<String> = rows
            .iter()
            .map(|r| r.get(idx).unwrap_or("").to_string())
            .collect();
        values.sort();
        values.dedup();
        vocab.insert(col.name.clone(), values);
    }

    let mut feature_names = Vec::new();
    for col in &schema.columns {
        match col.role {
            ColumnRole::Numeric => feature_names.push(col.name.clone()),
            ColumnRole::Categorical => {
                for v in &vocab[&col.name] {
                    feature_names.push(format!("{}={}", col.name, v));
                }
            }
            _ => {}
        }
    }

    let mut points = Vec::with_capacity(rows.len());
    for (row_no, record) in rows.iter().enumerate() {
        let mut features = Vec::with_capacity(feature_names.len());
        let mut annotations: Vec<String> = Vec::new();
        let mut label: Option<usize> = None;

        for col in &schema.columns {
            let idx = col_index[col.name.as_str()];
            let raw = record.get(idx).unwrap_or("");
            match col.role {
                ColumnRole::Numeric => {
                    let v: f64 = raw.parse().map_err(|_| Error::CsvValue {
                        row: row_no,
                        column: col.name.clone(),
                        message: format!("{raw:?} is not numeric"),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::CsvValue {
                            row: row_no,
                            column: col.name.clone(),
                            message: format!("{raw:?} is not finite"),
                        });
                    }
                    features.push(v);
                }
                ColumnRole::Categorical => {
                    let values = &vocab[&col.name];
                    for v in values {
                        features.push(if v == raw { 1.0 } else { 0.0 });
                    }
                }
                ColumnRole::Label => {
                    let pos = schema.classes.iter().position(|c| c == raw).ok_or_else(|| {
                        Error::UnknownLabel {
                            row: row_no,
                            label: raw.to_string(),
                            classes: schema.classes.clone(),
                        }
                    })?;
                    label = Some(pos);
                }
                ColumnRole::Annotation => annotations.push(raw.to_string()),
                ColumnRole::Ignore => {}
            }
        }

        let annotation = if annotations.is_empty() {
            None
        } else {
            Some(annotations.join("|"))
        };
        points.push(LabeledPoint {
            features,
            label: label.expect("label column validated above"),
            annotation,
            subpop_id: None,
            provenance: Provenance::Clean,
        });
    }

    let mut data = Dataset::new(points, schema.classes.len())?;
    data.class_names = Some(schema.classes.clone());
    data.feature_names = Some(feature_names);
    Ok(data)
}

/// Splits a dataset into train / aux / test parts.
///
/// Sizes are `floor(fraction * n)` with the rounding remainder assigned to
/// the train part; the shuffle is seeded, so the same `(data, fractions,
/// seed)` always produces the same partition. Errors if the fractions do not
/// sum to one or if any part would be empty.
pub fn split_dataset(data: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (ft, fa, fe) = fractions;
    let sum = ft + fa + fe;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSplit(format!(
            "fractions sum to {sum}, expected 1"
        )));
    }
    if ft < 0.0 || fa < 0.0 || fe < 0.0 {
        return Err(Error::InvalidSplit("fractions must be non-negative".into()));
    }
    let n = data.len();
    let n_train_floor = (ft * n as f64).floor() as usize;
    let n_aux = (fa * n as f64).floor() as usize;
    let n_test = (fe * n as f64).floor() as usize;
    let n_train = n - n_aux - n_test; // remainder goes to train

    for (name, size) in [("train", n_train), ("aux", n_aux), ("test", n_test)] {
        if size == 0 {
            return Err(Error::InvalidSplit(format!(
                "{name} part would be empty for n={n} and fractions {fractions:?}"
            )));
        }
    }
    debug_assert!(n_train >= n_train_floor);

    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut seed::rng(seed));

    let train_idx = &indices[..n_train];
    let aux_idx = &indices[n_train..n_train + n_aux];
    let test_idx = &indices[n_train + n_aux..];

    Ok(Split {
        train: data.subset(train_idx)?,
        aux: data.subset(aux_idx)?,
        test: data.subset(test_idx)?,
    })
}

/// One Gaussian blob of a synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobSpec {
    pub center: Vec<f64>,
    /// Isotropic standard deviation.
    pub sigma: f64,
    pub count: usize,
    pub label: usize,
}

/// Samples a dataset of isotropic Gaussian blobs.
///
/// Blob `i` stamps its index into `subpop_id` and into the annotation tag
/// (`"i"`), so both selection routes work on synthetic data out of the box.
/// Each blob draws from its own derived seed: adding or reordering blobs
/// does not perturb the samples of the others.
pub fn synth_gaussian_subpops(
    blobs: &[BlobSpec],
    num_classes: usize,
    seed: u64,
) -> Result<Dataset> {
    if blobs.is_empty() {
        return Err(Error::InvalidArgument("no blobs specified".into()));
    }
    let dim = blobs[0].center.len();
    for (i, b) in blobs.iter().enumerate() {
        if b.center.len() != dim {
            return Err(Error::InvalidArgument(format!(
                "blob {i} has center dimension {}, expected {dim}",
                b.center.len()
            )));
        }
        if b.count == 0 {
            return Err(Error::InvalidArgument(format!("blob {i} has count 0")));
        }
        if b.label >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "blob {i} has label {} outside 0..{num_classes}",
                b.label
            )));
        }
        if !(b.sigma.is_finite() && b.sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "blob {i} has invalid sigma {}",
                b.sigma
            )));
        }
    }

    let mut points = Vec::new();
    for (i, blob) in blobs.iter().enumerate() {
        let mut rng = seed::rng(seed::derive(seed, i as u64));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for _ in 0..blob.count {
            let features: Vec<f64> = blob
                .center
                .iter()
                .map(|c| c + blob.sigma * normal.sample(&mut rng))
                .collect();
            points.push(LabeledPoint {
                features,
                label: blob.label,
                annotation: Some(i.to_string()),
                subpop_id: Some(i),
                provenance: Provenance::Clean,
            });
        }
    }
    Dataset::new(points, num_classes)
}

/// Draws `count` indices in `0..n`, without replacement when
/// `count <= n`, with replacement otherwise.
pub(crate) fn sample_indices(n: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    if count <= n {
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(rng);
        indices.truncate(count);
        indices
    } else {
        (0..count).map(|_| rng.random_range(0..n)).collect()
    }
}
