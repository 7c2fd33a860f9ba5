//! Mixture-model machinery showing that subpopulation poisoning cannot be
//! prevented in general.
//!
//! The setting: data drawn from `k` disjoint subpopulations with weights
//! `α_i`, labels Bernoulli(`p_i`), and a learner that classifies each
//! subpopulation by the majority label it saw there (its decision for one
//! subpopulation depends only on that subpopulation's points). Flipping
//! every label of the smallest sampled subpopulation — plus one extra copy
//! to break the resulting exact tie — always flips the learner's decision
//! there, and a Chernoff bound sizes that attack at under `2αn` points
//! with high probability.

use serde::{Deserialize, Serialize};

use crate::attacks::{Generator, PoisonSet};
use crate::data::{Dataset, LabeledPoint, Provenance};
use crate::error::{Error, Result};
use crate::seed;

use rand::Rng;

/// A noisy `k`-subpopulation mixture over a binary label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureSpec {
    /// Sampling weight of each subpopulation; positive, summing to 1.
    pub weights: Vec<f64>,
    /// Probability that a point of subpopulation `i` gets label 1.
    pub label_probs: Vec<f64>,
}

impl MixtureSpec {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::InvalidMixture("no subpopulations".into()));
        }
        if self.weights.len() != self.label_probs.len() {
            return Err(Error::InvalidMixture(format!(
                "{} weights but {} label probabilities",
                self.weights.len(),
                self.label_probs.len()
            )));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidMixture(
                "weights must be positive and finite".into(),
            ));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        if self
            .label_probs
            .iter()
            .any(|p| !(p.is_finite() && (0.0..=1.0).contains(p)))
        {
            return Err(Error::InvalidMixture(
                "label probabilities must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Samples `n` points from the mixture. Each point's single feature and
/// subpopulation id are the drawn subpopulation index; the label is
/// Bernoulli in that subpopulation's probability.
pub fn sample_mixture(spec: &MixtureSpec, n: usize, seed_value: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be positive".into()));
    }
    let mut rng = seed::rng(seed_value);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let draw: f64 = rng.random();
        let mut acc = 0.0;
        let mut sub = spec.k() - 1;
        for (i, w) in spec.weights.iter().enumerate() {
            acc += w;
            if draw < acc {
                sub = i;
                break;
            }
        }
        let label = usize::from(rng.random_bool(spec.label_probs[sub]));
        points.push(LabeledPoint {
            features: vec![sub as f64],
            label,
            annotation: Some(sub.to_string()),
            subpop_id: Some(sub),
            provenance: Provenance::Clean,
        });
    }
    Dataset::new(points, 2)
}

/// Tie handling for a majority-vote mixture learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Ties answer 0.
    #[default]
    Zero,
    /// Ties answer 1.
    One,
    /// Ties answer the majority label among poison-provenance points in
    /// the subpopulation (0 when there are none or they tie too) —
    /// the tie-breaking most favorable to an attacker.
    PoisonedLabel,
}

/// A per-subpopulation majority-vote classifier.
///
/// Its decision for subpopulation `i` is a function of the labels observed
/// in subpopulation `i` only; subpopulations it never saw default to 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureLearner {
    pub labels: Vec<usize>,
    pub counts: Vec<usize>,
    pub tie_break: TieBreak,
}

impl MixtureLearner {
    pub fn predict(&self, subpop: usize) -> usize {
        self.labels.get(subpop).copied().unwrap_or(0)
    }
}

/// Fits the majority-vote learner over subpopulations `0..k`.
///
/// Labels must be binary; every point must carry a subpopulation id below
/// `k`.
pub fn fit_mixture_learner(data: &Dataset, k: usize, tie_break: TieBreak) -> Result<MixtureLearner> {
    if data.num_classes != 2 {
        return Err(Error::InvalidMixture(format!(
            "mixture learners are binary, data has {} classes",
            data.num_classes
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let mut ones = vec![0usize; k];
    let mut totals = vec![0usize; k];
    let mut poison_ones = vec![0usize; k];
    let mut poison_totals = vec![0usize; k];
    for p in &data.points {
        let sub = p
            .subpop_id
            .ok_or_else(|| Error::InvalidMixture("point without a subpopulation id".into()))?;
        if sub >= k {
            return Err(Error::InvalidMixture(format!(
                "subpopulation id {sub} outside 0..{k}"
            )));
        }
        totals[sub] += 1;
        ones[sub] += p.label;
        if p.provenance == Provenance::Poison {
            poison_totals[sub] += 1;
            poison_ones[sub] += p.label;
        }
    }
    let labels = (0..k)
        .map(|i| {
            let zeros = totals[i] - ones[i];
            if ones[i] > zeros {
                1
            } else if ones[i] < zeros {
                0
            } else {
                match tie_break {
                    TieBreak::Zero => 0,
                    TieBreak::One => 1,
                    TieBreak::PoisonedLabel => {
                        let p_ones = poison_ones[i];
                        let p_zeros = poison_totals[i] - p_ones;
                        usize::from(p_ones > p_zeros)
                    }
                }
            }
        })
        .collect();
    Ok(MixtureLearner {
        labels,
        counts: totals,
        tie_break,
    })
}

/// The impossibility construction: flipped-label copies of every point in
/// the smallest sampled subpopulation, plus one extra copy carrying the
/// anti-majority label.
///
/// The `s` flips cancel the original votes one-for-one, so the extra point
/// decides the poisoned majority `s + 1` against `s` — strictly, with no
/// tie left to break. When the clean subpopulation is itself tied,
/// learners with different tie handling disagree about the clean decision
/// and no single poison set can flip all of them at once; use
/// [`impossibility_attack_against`] to target a specific fitted learner.
/// Smallest-subpopulation ties resolve to the lowest id.
pub fn impossibility_attack(data: &Dataset) -> Result<PoisonSet> {
    let (target, members) = smallest_subpopulation(data)?;
    let ones = members.iter().filter(|p| p.label == 1).count();
    let majority = usize::from(ones * 2 > members.len());
    Ok(build_flip_attack(target, &members, 1 - majority))
}

/// The same construction aimed at a known learner: the extra point carries
/// the opposite of that learner's clean decision on the smallest
/// subpopulation, so the refit decision always flips — the adversary in
/// the impossibility argument picks its poison per learner.
pub fn impossibility_attack_against(data: &Dataset, clean_decision: usize) -> Result<PoisonSet> {
    if clean_decision > 1 {
        return Err(Error::InvalidArgument(format!(
            "clean decision must be a binary label, got {clean_decision}"
        )));
    }
    let (target, members) = smallest_subpopulation(data)?;
    Ok(build_flip_attack(target, &members, 1 - clean_decision))
}

fn smallest_subpopulation(data: &Dataset) -> Result<(usize, Vec<&LabeledPoint>)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if data.num_classes != 2 {
        return Err(Error::InvalidMixture(format!(
            "the impossibility attack is binary, data has {} classes",
            data.num_classes
        )));
    }
    let mut counts: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for p in &data.points {
        let sub = p
            .subpop_id
            .ok_or_else(|| Error::InvalidMixture("point without a subpopulation id".into()))?;
        *counts.entry(sub).or_insert(0) += 1;
    }
    let (&target, _) = counts
        .iter()
        .min_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(b.0)))
        .expect("dataset is non-empty");
    let members: Vec<&LabeledPoint> = data
        .points
        .iter()
        .filter(|p| p.subpop_id == Some(target))
        .collect();
    Ok((target, members))
}

fn build_flip_attack(target: usize, members: &[&LabeledPoint], extra_label: usize) -> PoisonSet {
    let size = members.len();
    let mut points: Vec<LabeledPoint> = members
        .iter()
        .map(|p| {
            let mut flipped = (*p).clone();
            flipped.label = 1 - flipped.label;
            flipped.provenance = Provenance::Poison;
            flipped
        })
        .collect();
    let mut extra = members[0].clone();
    extra.label = extra_label;
    extra.provenance = Provenance::Poison;
    points.push(extra);

    PoisonSet {
        points,
        origin: format!("subpop:{target}"),
        generator: Generator::LabelFlip,
        alpha: (size + 1) as f64 / size as f64,
        flip_label: None,
    }
}

/// Closed-form attack sizing from the multiplicative Chernoff bound.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChernoffBound {
    /// An attack of at most this size suffices…
    pub size_bound: f64,
    /// …with at least this probability.
    pub success_prob: f64,
}

/// For smallest mixture weight `alpha` and sample size `n`: an attack of
/// size below `2·alpha·n` flips a subpopulation with probability at least
/// `1 − exp(−alpha·n/2)`.
pub fn chernoff_attack_bound(alpha: f64, n: usize) -> Result<ChernoffBound> {
    if !(alpha.is_finite() && alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let an = alpha * n as f64;
    Ok(ChernoffBound {
        size_bound: 2.0 * an,
        success_prob: 1.0 - (-an / 2.0).exp(),
    })
}

/// Worst-case attack size under uniform weights: some subpopulation holds
/// at most `⌈n/k⌉` samples.
pub fn pigeonhole_bound(n: usize, k: usize) -> Result<usize> {
    if n == 0 || k == 0 {
        return Err(Error::InvalidArgument(
            "n and k must both be positive".into(),
        ));
    }
    Ok(n.div_ceil(k))
}

/// Monte Carlo check of the impossibility construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryReport {
    pub trials: usize,
    pub n: usize,
    pub k: usize,
    /// Fraction of trials where the targeted subpopulation's decision
    /// flipped under every tie-break setting.
    pub flip_rate: f64,
    pub mean_attack_size: f64,
    pub max_attack_size: usize,
    /// Fraction of trials where the smallest subpopulation count (absent
    /// subpopulations counting zero) stayed below the Chernoff size bound.
    pub chernoff_empirical_rate: f64,
    pub chernoff: ChernoffBound,
    pub pigeonhole: usize,
}

/// Samples `trials` datasets, attacks each, refits, and reports how often
/// the targeted decision flipped and how the attack sizes compare to the
/// closed-form bounds.
pub fn verify_theorem(
    spec: &MixtureSpec,
    n: usize,
    trials: usize,
    seed_value: u64,
) -> Result<TheoryReport> {
    spec.validate()?;
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be positive".into()));
    }
    let k = spec.k();
    let alpha_min = spec
        .weights
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let chernoff = chernoff_attack_bound(alpha_min, n)?;

    let tie_breaks = [TieBreak::Zero, TieBreak::One, TieBreak::PoisonedLabel];
    let mut flips = 0usize;
    let mut size_sum = 0usize;
    let mut size_max = 0usize;
    let mut under_bound = 0usize;
    for trial in 0..trials {
        let data = sample_mixture(spec, n, seed::derive(seed_value, trial as u64))?;

        let (target, _) = smallest_subpopulation(&data)?;
        let mut flipped_all = true;
        let mut attack_size = 0;
        for tb in tie_breaks {
            let before = fit_mixture_learner(&data, k, tb)?.predict(target);
            let attack = impossibility_attack_against(&data, before)?;
            attack_size = attack.len();
            let mut poisoned = data.clone();
            poisoned.extend(attack.points.iter().cloned())?;
            let after = fit_mixture_learner(&poisoned, k, tb)?.predict(target);
            if before == after {
                flipped_all = false;
            }
        }
        flips += usize::from(flipped_all);
        size_sum += attack_size;
        size_max = size_max.max(attack_size);

        let mut counts = vec![0usize; k];
        for p in &data.points {
            counts[p.subpop_id.expect("sampled points carry ids")] += 1;
        }
        let smallest = *counts.iter().min().expect("k >= 1") as f64;
        under_bound += usize::from(smallest < chernoff.size_bound);
    }
    Ok(TheoryReport {
        trials,
        n,
        k,
        flip_rate: flips as f64 / trials as f64,
        mean_attack_size: size_sum as f64 / trials as f64,
        max_attack_size: size_max,
        chernoff_empirical_rate: under_bound as f64 / trials as f64,
        chernoff,
        pigeonhole: pigeonhole_bound(n, k)?,
    })
}
