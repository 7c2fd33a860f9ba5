//! Dense numeric primitives shared by PCA and the outlier-score defenses:
//! a cyclic Jacobi eigensolver for symmetric matrices and a matrix-free
//! power iteration for the top right-singular direction.
//!
//! Dimensions here are desk scale (covariances of at most a few hundred
//! columns), where Jacobi sweeps are robust, allocation-light, and fully
//! deterministic — no randomized pivoting, no LAPACK backend.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

const JACOBI_MAX_SWEEPS: usize = 100;
const POWER_MAX_ITERS: usize = 10_000;
const POWER_TOL: f64 = 1e-13;

/// Eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues in non-increasing order and the matching unit
/// eigenvectors as rows. Each eigenvector's sign is fixed so that its
/// largest-magnitude component is positive, which makes the decomposition
/// reproducible across runs. Mild asymmetry from floating-point accumulation
/// is tolerated by symmetrizing the input first.
pub fn symmetric_eigen(a: &ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(Error::InvalidArgument(format!(
            "symmetric_eigen needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            m[[i, j]] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    let mut v: Array2<f64> = Array2::eye(n);
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = {
            let mut s = 0.0;
            for p in 0..n {
                for q in p + 1..n {
                    s += m[[p, q]] * m[[p, q]];
                }
            }
            s.sqrt()
        };
        if off <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                let mpp = m[[p, p]];
                let mqq = m[[q, q]];
                m[[p, p]] = mpp - t * apq;
                m[[q, q]] = mqq + t * apq;
                m[[p, q]] = 0.0;
                m[[q, p]] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let mrp = m[[r, p]];
                    let mrq = m[[r, q]];
                    m[[r, p]] = c * mrp - s * mrq;
                    m[[p, r]] = m[[r, p]];
                    m[[r, q]] = s * mrp + c * mrq;
                    m[[q, r]] = m[[r, q]];
                }
                for r in 0..n {
                    let vrp = v[[r, p]];
                    let vrq = v[[r, q]];
                    v[[r, p]] = c * vrp - s * vrq;
                    v[[r, q]] = s * vrp + c * vrq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).expect("finite eigenvalues"));

    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[[i, i]]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (row, &col) in order.iter().enumerate() {
        let mut max_idx = 0;
        for r in 0..n {
            vectors[[row, r]] = v[[r, col]];
            if v[[r, col]].abs() > v[[max_idx, col]].abs() {
                max_idx = r;
            }
        }
        if v[[max_idx, col]] < 0.0 {
            for r in 0..n {
                vectors[[row, r]] = -vectors[[row, r]];
            }
        }
    }
    Ok((eigenvalues, vectors))
}

/// Top right-singular direction of `m` by power iteration on `m^T m`,
/// without forming the Gram matrix.
///
/// Returns `None` for an (effectively) all-zero matrix. The direction's
/// sign is fixed like in [`symmetric_eigen`]; callers that only consume
/// squared projections are sign-agnostic anyway.
pub fn top_right_singular(m: &ArrayView2<f64>) -> Option<Array1<f64>> {
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 {
        return None;
    }
    let frob: f64 = m.iter().map(|x| x * x).sum();
    if frob <= 1e-300 {
        return None;
    }

    // Deterministic start: the dominant column direction, nudged so that an
    // unlucky exact orthogonality to the top eigenspace cannot persist.
    let mut col_norms = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            col_norms[c] += m[[r, c]] * m[[r, c]];
        }
    }
    let top_col = col_norms
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite norms"))
        .map(|(i, _)| i)
        .expect("at least one column");
    let mut v = Array1::zeros(cols);
    v[top_col] = 1.0;
    for c in 0..cols {
        v[c] += 1e-3 / (c + 1) as f64;
    }
    normalize(&mut v);

    let mut prev_lambda = f64::NEG_INFINITY;
    for _ in 0..POWER_MAX_ITERS {
        // w = m^T (m v)
        let mv = m.dot(&v);
        let mut w = m.t().dot(&mv);
        let lambda = v.dot(&w);
        if normalize(&mut w) == 0.0 {
            return None;
        }
        let delta = (&w - &v).mapv(f64::abs).sum().min((&w + &v).mapv(f64::abs).sum());
        v = w;
        if delta < POWER_TOL && (lambda - prev_lambda).abs() <= 1e-12 * lambda.abs().max(1.0) {
            break;
        }
        prev_lambda = lambda;
    }

    let mut max_idx = 0;
    for c in 0..cols {
        if v[c].abs() > v[max_idx].abs() {
            max_idx = c;
        }
    }
    if v[max_idx] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
    Some(v)
}

fn normalize(v: &mut Array1<f64>) -> f64 {
    let norm = v.dot(&*v).sqrt();
    if norm > 0.0 {
        v.mapv_inplace(|x| x / norm);
    }
    norm
}

/// Subtracts the column mean from every row, returning the mean.
pub fn center_rows(m: &mut Array2<f64>) -> Array1<f64> {
    let n = m.nrows() as f64;
    let mean = m.sum_axis(ndarray::Axis(0)) / n;
    for mut row in m.rows_mut() {
        row -= &mean;
    }
    mean
}

/// Solves `A x = b` for a symmetric positive-definite operator given only
/// matrix-vector products, via conjugate gradients from a zero start.
///
/// Returns the solution and the number of iterations used. Stops when the
/// residual falls below `rel_tol · ‖b‖`. A non-positive curvature `pᵀAp`
/// means the operator is not positive definite; exhausting `max_iters`
/// reports the residual reached.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    max_iters: usize,
    rel_tol: f64,
) -> Result<(Vec<f64>, usize)> {
    let n = b.len();
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok((x, 0));
    }
    let tol = rel_tol * b_norm;

    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rs_old: f64 = r.iter().map(|v| v * v).sum();

    for iter in 0..max_iters {
        if rs_old.sqrt() <= tol {
            return Ok((x, iter));
        }
        let ap = apply(&p);
        let p_ap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !p_ap.is_finite() || p_ap <= 0.0 {
            return Err(Error::NonPositiveDefiniteHessian(format!(
                "conjugate gradients found curvature {p_ap} at iteration {iter}"
            )));
        }
        let alpha = rs_old / p_ap;
        for j in 0..n {
            x[j] += alpha * p[j];
            r[j] -= alpha * ap[j];
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        if !rs_new.is_finite() {
            return Err(Error::NonPositiveDefiniteHessian(
                "conjugate gradients residual became non-finite".into(),
            ));
        }
        let beta = rs_new / rs_old;
        for j in 0..n {
            p[j] = r[j] + beta * p[j];
        }
        rs_old = rs_new;
    }
    if rs_old.sqrt() <= tol {
        return Ok((x, max_iters));
    }
    Err(Error::CgDidNotConverge {
        iterations: max_iters,
        residual: rs_old.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn eigen_of_diagonal_matrix_sorts_descending() {
        let a = array![[1.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 3.0]];
        let (vals, vecs) = symmetric_eigen(&a.view()).unwrap();
        assert_eq!(vals, vec![5.0, 3.0, 1.0]);
        assert_eq!(vecs.row(0).to_vec(), vec![0.0, 1.0, 0.0]);
        assert_eq!(vecs.row(1).to_vec(), vec![0.0, 0.0, 1.0]);
        assert_eq!(vecs.row(2).to_vec(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn eigen_of_two_by_two_matches_hand_computation() {
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let (vals, vecs) = symmetric_eigen(&a.view()).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        let s = 1.0 / 2.0f64.sqrt();
        assert!((vecs[[0, 0]] - s).abs() < 1e-12);
        assert!((vecs[[0, 1]] - s).abs() < 1e-12);
        assert!((vecs[[1, 0]].abs() - s).abs() < 1e-12);
    }

    #[test]
    fn eigen_reconstructs_random_symmetric_matrix() {
        use rand::Rng;
        let mut rng = crate::seed::rng(41);
        let n = 8;
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            for j in i..n {
                let v: f64 = rng.random_range(-1.0..1.0);
                a[[i, j]] = v;
                a[[j, i]] = v;
            }
        }
        let (vals, vecs) = symmetric_eigen(&a.view()).unwrap();
        // A v_i = lambda_i v_i and pairwise orthonormality.
        for i in 0..n {
            let vi = vecs.row(i);
            let av = a.dot(&vi);
            for (x, y) in av.iter().zip(vi.iter()) {
                assert!((x - vals[i] * y).abs() < 1e-9, "{x} vs {}", vals[i] * y);
            }
            for j in 0..n {
                let d = vecs.row(i).dot(&vecs.row(j));
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((d - expected).abs() < 1e-10);
            }
        }
        // Trace is preserved.
        let trace: f64 = (0..n).map(|i| a[[i, i]]).sum();
        let sum: f64 = vals.iter().sum();
        assert!((trace - sum).abs() < 1e-9);
    }

    #[test]
    fn eigenvalues_match_external_solver() {
        use rand::Rng;
        let mut rng = crate::seed::rng(42);
        let n = 6;
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            for j in i..n {
                let v: f64 = rng.random_range(-2.0..2.0);
                a[[i, j]] = v;
                a[[j, i]] = v;
            }
        }
        let (vals, _) = symmetric_eigen(&a.view()).unwrap();

        let na = nalgebra::DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
        let mut expected: Vec<f64> = na.symmetric_eigen().eigenvalues.iter().cloned().collect();
        expected.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for (mine, theirs) in vals.iter().zip(&expected) {
            assert!((mine - theirs).abs() < 1e-10, "{mine} vs {theirs}");
        }
    }

    #[test]
    fn top_singular_direction_matches_external_svd() {
        use rand::Rng;
        let mut rng = crate::seed::rng(43);
        let (rows, cols) = (12, 5);
        let mut m = Array2::zeros((rows, cols));
        for i in 0..rows {
            for j in 0..cols {
                m[[i, j]] = rng.random_range(-1.0..1.0);
            }
        }
        let v = top_right_singular(&m.view()).unwrap();

        let na = nalgebra::DMatrix::from_fn(rows, cols, |i, j| m[[i, j]]);
        let svd = na.svd(false, true);
        let vt = svd.v_t.unwrap();
        let top: Vec<f64> = vt.row(0).iter().cloned().collect();
        let alignment: f64 = v.iter().zip(&top).map(|(a, b)| a * b).sum();
        assert!(
            (alignment.abs() - 1.0).abs() < 1e-10,
            "alignment {alignment}"
        );
    }

    #[test]
    fn zero_matrix_has_no_singular_direction() {
        let m = Array2::<f64>::zeros((4, 3));
        assert!(top_right_singular(&m.view()).is_none());
    }

    #[test]
    fn center_rows_zeroes_the_mean() {
        let mut m = array![[1.0, 2.0], [3.0, 6.0]];
        let mean = center_rows(&mut m);
        assert_eq!(mean.to_vec(), vec![2.0, 4.0]);
        assert_eq!(m[[0, 0]], -1.0);
        assert_eq!(m[[1, 1]], 2.0);
        let col_sum = m.sum_axis(ndarray::Axis(0));
        assert!(col_sum.iter().all(|v| v.abs() < 1e-12));
    }

    fn random_spd(n: usize, seed: u64) -> Array2<f64> {
        use rand::Rng;
        let mut rng = crate::seed::rng(seed);
        let mut g = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                g[[i, j]] = rng.random_range(-1.0..1.0);
            }
        }
        let mut a = g.t().dot(&g);
        for i in 0..n {
            a[[i, i]] += 0.5;
        }
        a
    }

    #[test]
    fn conjugate_gradient_matches_external_direct_solve() {
        let n = 7;
        let a = random_spd(n, 44);
        let b: Vec<f64> = (0..n).map(|i| (i as f64) - 2.5).collect();

        let apply = |v: &[f64]| -> Vec<f64> {
            let av = a.dot(&Array1::from(v.to_vec()));
            av.to_vec()
        };
        let (x, iters) = conjugate_gradient(apply, &b, 10 * n, 1e-12).unwrap();
        assert!(iters <= 10 * n);

        let na = nalgebra::DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
        let nb = nalgebra::DVector::from_vec(b.clone());
        let expected = na.lu().solve(&nb).unwrap();
        for (mine, theirs) in x.iter().zip(expected.iter()) {
            assert!((mine - theirs).abs() < 1e-8, "{mine} vs {theirs}");
        }
    }

    #[test]
    fn conjugate_gradient_rejects_indefinite_operators() {
        let apply = |v: &[f64]| vec![-v[0], -v[1]];
        let err = conjugate_gradient(apply, &[1.0, 2.0], 10, 1e-10).unwrap_err();
        assert!(matches!(err, Error::NonPositiveDefiniteHessian(_)));
    }

    #[test]
    fn conjugate_gradient_reports_non_convergence() {
        let a = random_spd(6, 45);
        let apply = |v: &[f64]| a.dot(&Array1::from(v.to_vec())).to_vec();
        let b = vec![1.0; 6];
        let err = conjugate_gradient(apply, &b, 1, 1e-14).unwrap_err();
        match err {
            Error::CgDidNotConverge {
                iterations,
                residual,
            } => {
                assert_eq!(iterations, 1);
                assert!(residual > 0.0);
            }
            other => panic!("expected CgDidNotConverge, got {other:?}"),
        }
    }

    #[test]
    fn conjugate_gradient_zero_rhs_is_zero() {
        let apply = |v: &[f64]| v.to_vec();
        let (x, iters) = conjugate_gradient(apply, &[0.0, 0.0, 0.0], 5, 1e-10).unwrap();
        assert_eq!(x, vec![0.0; 3]);
        assert_eq!(iters, 0);
    }
}
