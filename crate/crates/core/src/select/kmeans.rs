//! Seeded k-means with k-means++ initialization and restarts.

use ndarray::ArrayView2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

const DEFAULT_RESTARTS: usize = 10;
const MAX_LLOYD_ITERS: usize = 300;
const RELATIVE_INERTIA_TOL: f64 = 1e-6;

/// Result of a k-means run.
#[derive(Debug, Clone)]
pub struct KmeansFit {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to assigned centers.
    pub inertia: f64,
    /// Inertia after each Lloyd assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
}

/// Runs k-means with the default 10 k-means++ restarts, returning the
/// restart with the lowest inertia.
pub fn kmeans(x: &ArrayView2<f64>, k: usize, seed_value: u64) -> Result<KmeansFit> {
    kmeans_with_restarts(x, k, seed_value, DEFAULT_RESTARTS)
}

/// As [`kmeans`] with an explicit restart count.
///
/// Each restart draws from a seed derived from `seed_value`, so the whole
/// procedure is deterministic. Lloyd iterations stop when assignments reach
/// a fixpoint, when the relative inertia improvement drops below `1e-6`, or
/// after 300 iterations. A cluster left empty by an assignment step is
/// re-seeded at the point currently farthest from its assigned center; if
/// `k` exceeds the number of distinct points, surplus clusters stay empty.
pub fn kmeans_with_restarts(
    x: &ArrayView2<f64>,
    k: usize,
    seed_value: u64,
    restarts: usize,
) -> Result<KmeansFit> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "k must be in 1..={n}, got {k}"
        )));
    }
    if restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be positive".into()));
    }

    let mut best: Option<KmeansFit> = None;
    for restart in 0..restarts {
        let mut rng = seed::rng(seed::derive(seed_value, restart as u64));
        let fit = lloyd(x, k, &mut rng);
        let better = match &best {
            None => true,
            Some(b) => fit.inertia < b.inertia,
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd(x: &ArrayView2<f64>, k: usize, rng: &mut impl Rng) -> KmeansFit {
    let n = x.nrows();
    let d = x.ncols();
    let mut centers = plus_plus_init(x, k, rng);
    let mut assignments = vec![0usize; n];
    let mut inertia_trace = Vec::new();
    let mut prev_inertia = f64::INFINITY;

    for _ in 0..MAX_LLOYD_ITERS {
        // Assignment step.
        let mut inertia = 0.0;
        let mut changed = false;
        for i in 0..n {
            let point = x.row(i);
            let (nearest, dist) = nearest_center(point.as_slice().expect("row"), &centers);
            if assignments[i] != nearest {
                changed = true;
                assignments[i] = nearest;
            }
            inertia += dist;
        }
        inertia_trace.push(inertia);

        // Update step.
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignments[i]] += 1;
            for j in 0..d {
                sums[assignments[i]][j] += x[[i, j]];
            }
        }
        let mut reseeded = false;
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[c][j] = sums[c][j] / counts[c] as f64;
                }
            } else {
                // Re-seed an empty cluster at the point farthest from its
                // assigned center.
                let mut far_idx = 0;
                let mut far_dist = -1.0;
                for i in 0..n {
                    let dist = sq_dist(
                        x.row(i).as_slice().expect("row"),
                        &centers[assignments[i]],
                    );
                    if dist > far_dist {
                        far_dist = dist;
                        far_idx = i;
                    }
                }
                if far_dist > 0.0 {
                    for j in 0..d {
                        centers[c][j] = x[[far_idx, j]];
                    }
                    reseeded = true;
                }
            }
        }

        let converged = !changed && !reseeded;
        let small_improvement =
            prev_inertia.is_finite() && prev_inertia - inertia <= RELATIVE_INERTIA_TOL * prev_inertia.max(f64::MIN_POSITIVE);
        if converged || small_improvement {
            break;
        }
        prev_inertia = inertia;
    }

    // Final assignment against the final centers.
    let mut inertia = 0.0;
    for i in 0..n {
        let (nearest, dist) = nearest_center(x.row(i).as_slice().expect("row"), &centers);
        assignments[i] = nearest;
        inertia += dist;
    }
    inertia_trace.push(inertia);

    KmeansFit {
        centers,
        assignments,
        inertia,
        inertia_trace,
    }
}

fn plus_plus_init(x: &ArrayView2<f64>, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = x.nrows();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    centers.push(x.row(first).to_vec());

    let mut dists: Vec<f64> = (0..n)
        .map(|i| sq_dist(x.row(i).as_slice().expect("row"), &centers[0]))
        .collect();

    while centers.len() < k {
        let total: f64 = dists.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in dists.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining points coincide with existing centers.
            rng.random_range(0..n)
        };
        let center = x.row(idx).to_vec();
        for i in 0..n {
            let d = sq_dist(x.row(i).as_slice().expect("row"), &center);
            if d < dists[i] {
                dists[i] = d;
            }
        }
        centers.push(center);
    }
    centers
}

/// Index and squared distance of the nearest center; ties go to the lowest
/// center index.
pub(crate) fn nearest_center(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_dist = sq_dist(point, &centers[0]);
    for (c, center) in centers.iter().enumerate().skip(1) {
        let dist = sq_dist(point, center);
        if dist < best_dist {
            best = c;
            best_dist = dist;
        }
    }
    (best, best_dist)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
