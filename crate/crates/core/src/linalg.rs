//! Small dense decompositions used by ITQ: cyclic Jacobi for symmetric
//! eigenproblems and one-sided Jacobi SVD for square matrices.

use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::Matrix;

const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix. Returns eigenvalues in
/// descending order and the matching eigenvectors as columns.
pub fn symmetric_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale: f64 = m.as_slice().iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap_or(core::cmp::Ordering::Equal).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, dst)] = v[(k, src)];
        }
    }
    (values, vectors)
}

/// Thin SVD `a = U diag(s) Vᵀ` of a square matrix via one-sided Jacobi.
/// Columns of `U` belonging to zero singular values are completed to an
/// orthonormal basis.
pub fn svd_square(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let n = a.rows();
    debug_assert_eq!(n, a.cols());
    let mut u = a.clone();
    let mut v = Matrix::identity(n);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for k in 0..n {
                    alpha += u[(k, p)] * u[(k, p)];
                    beta += u[(k, q)] * u[(k, q)];
                    gamma += u[(k, p)] * u[(k, q)];
                }
                if gamma.abs() <= 1e-15 * libm::sqrt(alpha * beta) || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                for k in 0..n {
                    let ukp = u[(k, p)];
                    let ukq = u[(k, q)];
                    u[(k, p)] = c * ukp - s * ukq;
                    u[(k, q)] = s * ukp + c * ukq;
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s = vec![0.0; n];
    let max_norm = (0..n).map(|j| libm::sqrt((0..n).map(|k| u[(k, j)] * u[(k, j)]).sum::<f64>())).fold(0.0, f64::max);
    let mut zero_cols = Vec::new();
    for j in 0..n {
        let norm = libm::sqrt((0..n).map(|k| u[(k, j)] * u[(k, j)]).sum::<f64>());
        s[j] = norm;
        if norm > 1e-14 * max_norm.max(f64::MIN_POSITIVE) {
            for k in 0..n {
                u[(k, j)] /= norm;
            }
        } else {
            zero_cols.push(j);
        }
    }
    for &j in &zero_cols {
        complete_column(&mut u, j, &zero_cols);
    }
    (u, s, v)
}

/// Replaces column `j` of `u` with a unit vector orthogonal to every other
/// populated column.
fn complete_column(u: &mut Matrix, j: usize, pending: &[usize]) {
    let n = u.rows();
    for e in 0..n {
        let mut cand = vec![0.0; n];
        cand[e] = 1.0;
        for c in 0..n {
            if c == j || (pending.contains(&c) && c > j) {
                continue;
            }
            let proj: f64 = (0..n).map(|k| u[(k, c)] * cand[k]).sum();
            for k in 0..n {
                cand[k] -= proj * u[(k, c)];
            }
        }
        let norm = libm::sqrt(cand.iter().map(|x| x * x).sum::<f64>());
        if norm > 1e-6 {
            for k in 0..n {
                u[(k, j)] = cand[k] / norm;
            }
            return;
        }
    }
}
