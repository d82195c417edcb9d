//! Small dense symmetric routines.
//!
//! Every matrix this crate factorizes is a tiny Gram or information matrix
//! (p ≤ candidate order + 1, q = number of propensity parameters), so a
//! hand-rolled Cholesky and a cyclic Jacobi eigensolver beat pulling in a
//! LAPACK backend.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Condition-number threshold above which a solve is treated as singular.
pub const DEFAULT_COND_LIMIT: f64 = 1e12;

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
/// Returns `None` when a pivot is not strictly positive.
pub fn cholesky(a: ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / dj;
        }
    }
    Some(l)
}

/// Solves `L Lᵀ x = b` given the lower Cholesky factor.
pub fn cholesky_solve(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    // forward: L y = b
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[[i, k]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    // backward: Lᵀ x = y
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), eigenvalues descending.
pub fn sym_eigen(a: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.to_owned();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j] ] * m[[i, j]];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frob(&m)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).unwrap());
    let vals = Array1::from_iter(idx.iter().map(|&i| m[[i, i]]));
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (new, &old) in idx.iter().enumerate() {
        for r in 0..n {
            vecs[[r, new]] = v[[r, old]];
        }
    }
    (vals, vecs)
}

fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Condition number estimate (ratio of extreme absolute eigenvalues) of a
/// symmetric matrix.
pub fn sym_cond(a: ArrayView2<f64>) -> f64 {
    let (vals, _) = sym_eigen(a);
    let max = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = vals.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves a symmetric positive definite system, failing when the condition
/// estimate exceeds `cond_limit`.
pub fn solve_spd(
    a: ArrayView2<f64>,
    b: ArrayView1<f64>,
    context: &'static str,
    cond_limit: f64,
) -> Result<Array1<f64>> {
    if let Some(l) = cholesky(a) {
        let cond = chol_cond_estimate(&l);
        if cond <= cond_limit {
            return Ok(cholesky_solve(&l, b));
        }
        return Err(Error::SingularMatrix { context, cond });
    }
    Err(Error::SingularMatrix {
        context,
        cond: f64::INFINITY,
    })
}

/// Cheap condition estimate from the squared ratio of extreme Cholesky
/// diagonal entries; exact for diagonal matrices, adequate as a guard.
pub(crate) fn chol_cond_estimate(l: &Array2<f64>) -> f64 {
    let mut dmax = 0.0f64;
    let mut dmin = f64::INFINITY;
    for i in 0..l.nrows() {
        let d = l[[i, i]];
        dmax = dmax.max(d);
        dmin = dmin.min(d);
    }
    (dmax / dmin).powi(2)
}

/// Inverse of a symmetric positive semidefinite matrix via its spectrum.
/// Eigenvalues below `cond_limit⁻¹·λmax` are dropped (pseudo-inverse);
/// the second return value reports whether any were dropped.
pub fn pinv_spd(a: ArrayView2<f64>, cond_limit: f64) -> (Array2<f64>, bool) {
    let n = a.nrows();
    let (vals, vecs) = sym_eigen(a);
    let lmax = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cut = if lmax > 0.0 { lmax / cond_limit } else { 0.0 };
    let mut truncated = false;
    let mut inv = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        if vals[k] > cut && vals[k] > 0.0 {
            let w = 1.0 / vals[k];
            for i in 0..n {
                for j in 0..n {
                    inv[[i, j]] += w * vecs[[i, k]] * vecs[[j, k]];
                }
            }
        } else {
            truncated = true;
        }
    }
    (inv, truncated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cholesky_round_trip() {
        let a = array![[4.0, 2.0, 0.6], [2.0, 5.0, 1.0], [0.6, 1.0, 3.0]];
        let l = cholesky(a.view()).unwrap();
        let recon = l.dot(&l.t());
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(recon[[i, j]], a[[i, j]], epsilon = 1e-12);
            }
        }
        let b = array![1.0, -2.0, 0.5];
        let x = cholesky_solve(&l, b.view());
        let ax = a.dot(&x);
        for i in 0..3 {
            assert_abs_diff_eq!(ax[i], b[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(a.view()).is_none());
    }

    #[test]
    fn jacobi_eigen_known_values() {
        // eigenvalues of [[2,1],[1,2]] are 3 and 1
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let (vals, vecs) = sym_eigen(a.view());
        assert_abs_diff_eq!(vals[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], 1.0, epsilon = 1e-12);
        // V diag(vals) Vᵀ reconstructs A
        let mut recon = Array2::<f64>::zeros((2, 2));
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    recon[[i, j]] += vals[k] * vecs[[i, k]] * vecs[[j, k]];
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(recon[[i, j]], a[[i, j]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn solve_spd_flags_ill_conditioned() {
        let a = array![[1.0, 0.0], [0.0, 1e-14]];
        let b = array![1.0, 1.0];
        let err = solve_spd(a.view(), b.view(), "test", 1e12).unwrap_err();
        assert!(matches!(err, Error::SingularMatrix { .. }));
    }

    #[test]
    fn pinv_spd_inverts_and_truncates() {
        let a = array![[3.0, 0.0], [0.0, 2.0]];
        let (inv, trunc) = pinv_spd(a.view(), 1e12);
        assert!(!trunc);
        assert_abs_diff_eq!(inv[[0, 0]], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(inv[[1, 1]], 0.5, epsilon = 1e-12);

        let sing = array![[1.0, 1.0], [1.0, 1.0]];
        let (pinv, trunc) = pinv_spd(sing.view(), 1e12);
        assert!(trunc);
        // Moore-Penrose inverse of the rank-1 matrix is itself / 4
        assert_abs_diff_eq!(pinv[[0, 0]], 0.25, epsilon = 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn spd_solve_matches_direct(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 1 + (seed as usize % 5);
            let m = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
            let a = m.t().dot(&m) + Array2::<f64>::eye(n) * 0.5;
            let b = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
            let x = solve_spd(a.view(), b.view(), "prop", 1e12).unwrap();
            let ax = a.dot(&x);
            for i in 0..n {
                proptest::prop_assert!((ax[i] - b[i]).abs() < 1e-9);
            }
        }
    }
}
