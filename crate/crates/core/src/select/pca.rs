//! Principal component analysis over representation matrices.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// A fitted PCA projection: `basis` holds the top right-singular directions
/// of the centered data as rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaModel {
    pub basis: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Sample variance captured by each basis row (non-increasing).
    pub explained_variance: Vec<f64>,
}

/// Fits a `r`-component PCA to the rows of `x`.
///
/// Components beyond the numerical rank of the centered data (for example
/// when a direction has zero variance) are zero-padded: their basis row is
/// the zero vector and their explained variance is 0. Projections onto such
/// rows are identically zero, so downstream clustering simply ignores them.
pub fn pca_fit(x: &ArrayView2<f64>, r: usize) -> Result<PcaModel> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "pca needs at least 2 rows, got {n}"
        )));
    }
    if r == 0 || r > n.min(d) {
        return Err(Error::InvalidArgument(format!(
            "pca rank {r} out of range 1..={}",
            n.min(d)
        )));
    }

    let mut centered = x.to_owned();
    let mean = linalg::center_rows(&mut centered);

    // Sample covariance of the rows.
    let mut cov = Array2::zeros((d, d));
    for row in centered.rows() {
        for i in 0..d {
            for j in i..d {
                cov[[i, j]] += row[i] * row[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[[i, j]] /= denom;
            cov[[j, i]] = cov[[i, j]];
        }
    }

    let (eigenvalues, eigenvectors) = linalg::symmetric_eigen(&cov.view())?;
    let rank_tol = 1e-12 * eigenvalues.first().copied().unwrap_or(0.0).max(1e-300);

    let mut basis = Vec::with_capacity(r);
    let mut explained = Vec::with_capacity(r);
    for i in 0..r {
        if eigenvalues[i] > rank_tol {
            basis.push(eigenvectors.row(i).to_vec());
            explained.push(eigenvalues[i]);
        } else {
            basis.push(vec![0.0; d]);
            explained.push(0.0);
        }
    }
    Ok(PcaModel {
        basis,
        mean: mean.to_vec(),
        explained_variance: explained,
    })
}

impl PcaModel {
    /// Projects one vector onto the fitted components.
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        self.basis
            .iter()
            .map(|row| {
                row.iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(b, (v, m))| b * (v - m))
                    .sum()
            })
            .collect()
    }

    /// Projects every row of a matrix.
    pub fn transform_matrix(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.basis.len()));
        for (i, row) in x.rows().into_iter().enumerate() {
            let proj = self.transform(row.as_slice().expect("contiguous row"));
            for (j, v) in proj.iter().enumerate() {
                out[[i, j]] = *v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::seed::rng(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn recovers_a_line_through_three_dimensions() {
        // Points along direction (1, 2, -1) with an offset.
        let dir = [1.0, 2.0, -1.0];
        let norm = (6.0f64).sqrt();
        let mut x = Array2::zeros((10, 3));
        for i in 0..10 {
            let t = i as f64 - 4.5;
            for j in 0..3 {
                x[[i, j]] = 3.0 + t * dir[j];
            }
        }
        let pca = pca_fit(&x.view(), 1).unwrap();
        let alignment: f64 = pca.basis[0]
            .iter()
            .zip(&dir)
            .map(|(b, d)| b * d / norm)
            .sum();
        assert!((alignment.abs() - 1.0).abs() < 1e-10, "alignment {alignment}");
        // One component explains everything; variance matches the t-spread.
        let t_var = {
            let ts: Vec<f64> = (0..10).map(|i| (i as f64 - 4.5) * norm).collect();
            let m = ts.iter().sum::<f64>() / 10.0;
            ts.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / 9.0
        };
        assert!((pca.explained_variance[0] - t_var).abs() / t_var < 1e-10);
    }

    #[test]
    fn full_rank_projection_is_an_isometry() {
        let x = random_matrix(12, 4, 51);
        let pca = pca_fit(&x.view(), 4).unwrap();
        let proj = pca.transform_matrix(&x.view());
        for i in 0..12 {
            for j in i + 1..12 {
                let orig: f64 = (0..4)
                    .map(|c| (x[[i, c]] - x[[j, c]]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let mapped: f64 = (0..4)
                    .map(|c| (proj[[i, c]] - proj[[j, c]]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((orig - mapped).abs() < 1e-9, "{orig} vs {mapped}");
            }
        }
    }

    #[test]
    fn explained_variance_matches_external_eigensolver() {
        let x = random_matrix(20, 5, 52);
        let pca = pca_fit(&x.view(), 2).unwrap();

        // Independent route: dense eigendecomposition of the 5x5 sample
        // covariance via nalgebra.
        let n = 20;
        let mean: Vec<f64> = (0..5)
            .map(|c| (0..n).map(|r| x[[r, c]]).sum::<f64>() / n as f64)
            .collect();
        let cov = nalgebra::DMatrix::from_fn(5, 5, |i, j| {
            (0..n)
                .map(|r| (x[[r, i]] - mean[i]) * (x[[r, j]] - mean[j]))
                .sum::<f64>()
                / (n - 1) as f64
        });
        let mut eig: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().cloned().collect();
        eig.sort_by(|a, b| b.partial_cmp(a).unwrap());

        for (mine, oracle) in pca.explained_variance.iter().zip(&eig) {
            assert!(
                (mine - oracle).abs() / oracle < 1e-10,
                "{mine} vs {oracle}"
            );
        }
    }

    #[test]
    fn projection_variance_equals_explained_variance() {
        let x = random_matrix(25, 6, 53);
        let pca = pca_fit(&x.view(), 3).unwrap();
        let proj = pca.transform_matrix(&x.view());
        for c in 0..3 {
            let m: f64 = (0..25).map(|r| proj[[r, c]]).sum::<f64>() / 25.0;
            let var: f64 =
                (0..25).map(|r| (proj[[r, c]] - m).powi(2)).sum::<f64>() / 24.0;
            let ev = pca.explained_variance[c];
            assert!((var - ev).abs() / ev < 1e-6, "component {c}: {var} vs {ev}");
        }
    }

    #[test]
    fn basis_rows_are_orthonormal() {
        let x = random_matrix(15, 5, 54);
        let pca = pca_fit(&x.view(), 3).unwrap();
        for i in 0..3 {
            for j in i..3 {
                let d: f64 = pca.basis[i]
                    .iter()
                    .zip(&pca.basis[j])
                    .map(|(a, b)| a * b)
                    .sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((d - expected).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_variance_components_are_zero_padded() {
        let x = Array2::from_shape_fn((6, 3), |(_, j)| j as f64);
        let pca = pca_fit(&x.view(), 2).unwrap();
        assert!(pca.basis.iter().all(|row| row.iter().all(|v| *v == 0.0)));
        assert_eq!(pca.explained_variance, vec![0.0, 0.0]);
        assert_eq!(pca.transform(&[9.0, 9.0, 9.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn rank_bounds_are_enforced() {
        let x = random_matrix(4, 3, 55);
        assert!(pca_fit(&x.view(), 0).is_err());
        assert!(pca_fit(&x.view(), 4).is_err());
        let tall = random_matrix(2, 5, 56);
        assert!(pca_fit(&tall.view(), 3).is_err());
    }
}
