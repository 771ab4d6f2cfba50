//! Iterative quantization: PCA to `d` dimensions, then alternate
//! `B = sgn(V R)` with the orthogonal Procrustes update of `R`.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::hard_sign;
use crate::error::{AmesError, Result};
use crate::linalg::{svd_square, symmetric_eigen};
use crate::numerics::Matrix;

#[derive(Clone, Debug)]
pub struct ItqFit {
    /// `pca · rotation`, D×d. Used as the binarization weights.
    pub weight: Matrix,
    /// D×d principal directions.
    pub pca: Matrix,
    /// d×d orthogonal rotation.
    pub rotation: Matrix,
    pub mean: Vec<f64>,
    /// `‖B − V R‖_F` at each iteration, after the code update.
    pub losses: Vec<f64>,
}

fn random_rotation(d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Matrix::zeros(d, d);
    for v in g.as_mut_slice() {
        *v = StandardNormal.sample(&mut rng);
    }
    let (u, _, v) = svd_square(&g);
    u.matmul_t(&v).expect("square")
}

/// Fits ITQ with a rotation drawn from `seed`.
pub fn itq_fit(descriptors: &Matrix, bits: usize, iters: usize, seed: u64) -> Result<ItqFit> {
    itq_fit_from_rotation(descriptors, bits, iters, random_rotation(bits, seed))
}

/// Fits ITQ starting from the given orthogonal rotation.
pub fn itq_fit_from_rotation(descriptors: &Matrix, bits: usize, iters: usize, initial: Matrix) -> Result<ItqFit> {
    let (n, dim) = (descriptors.rows(), descriptors.cols());
    if bits == 0 || bits > dim {
        return Err(AmesError::Config("code length must be in 1..=descriptor dim"));
    }
    if n <= bits {
        return Err(AmesError::RankDeficient(format!("{n} samples for {bits} bits; need more samples than bits")));
    }
    if initial.rows() != bits || initial.cols() != bits {
        return Err(AmesError::Shape { what: "initial rotation", expected: bits, got: initial.rows() });
    }
    let mut mean = descriptors.column_sums();
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = descriptors.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut cov = centered.t_matmul(&centered)?;
    cov.scale(1.0 / n as f64);
    let (values, vectors) = symmetric_eigen(&cov);
    let top = values[0].max(0.0);
    if !(top > 0.0) || values[bits - 1] <= 1e-10 * top {
        return Err(AmesError::RankDeficient(format!("only {} informative directions for {bits} bits", values.iter().filter(|&&v| v > 1e-10 * top).count())));
    }
    let mut pca = Matrix::zeros(dim, bits);
    for i in 0..dim {
        for j in 0..bits {
            pca[(i, j)] = vectors[(i, j)];
        }
    }
    let v = centered.matmul(&pca)?;
    let mut rotation = initial;
    let mut losses = Vec::with_capacity(iters);
    for _ in 0..iters {
        let projected = v.matmul(&rotation)?;
        let mut codes = projected.clone();
        codes.as_mut_slice().iter_mut().for_each(|x| *x = hard_sign(*x));
        let loss: f64 = codes.as_slice().iter().zip(projected.as_slice()).map(|(b, p)| (b - p) * (b - p)).sum();
        losses.push(libm::sqrt(loss));
        // maximize tr(Rᵀ VᵀB): VᵀB = U S Wᵀ  =>  R = U Wᵀ
        let m = v.t_matmul(&codes)?;
        let (u, _, w) = svd_square(&m);
        rotation = u.matmul_t(&w)?;
    }
    let weight = pca.matmul(&rotation)?;
    Ok(ItqFit { weight, pca, rotation, mean, losses })
}
