//! Product quantization with one byte (256 centroids) per sub-space.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AmesError, Result};
use crate::numerics::Matrix;

pub const CENTROIDS: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct PqCodebook {
    dim: usize,
    sub_dim: usize,
    /// `n_sub × 256 × sub_dim`, row-major.
    centroids: Vec<f64>,
}

impl PqCodebook {
    pub fn from_centroids(dim: usize, sub_dim: usize, centroids: Vec<f64>) -> Result<Self> {
        if sub_dim == 0 || !dim.is_multiple_of(sub_dim) {
            return Err(AmesError::Config("global dim must be divisible by the sub-space dim"));
        }
        let expected = dim / sub_dim * CENTROIDS * sub_dim;
        if centroids.len() != expected {
            return Err(AmesError::Shape { what: "codebook centroids", expected, got: centroids.len() });
        }
        Ok(Self { dim, sub_dim, centroids })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    pub fn num_subspaces(&self) -> usize {
        self.dim / self.sub_dim
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn centroid(&self, sub: usize, index: usize) -> &[f64] {
        let s = self.sub_dim;
        let off = (sub * CENTROIDS + index) * s;
        &self.centroids[off..off + s]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PqTrainConfig {
    pub sub_dim: usize,
    /// Lloyd iterations per sub-space.
    pub iterations: usize,
    pub seed: u64,
}

impl PqTrainConfig {
    pub fn new(sub_dim: usize, seed: u64) -> Self {
        Self { sub_dim, iterations: 25, seed }
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; ties go to the smallest index.
fn nearest(point: &[f64], centroids: &[f64], s: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.chunks_exact(s).enumerate() {
        let d = sq_dist(point, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp<R: Rng>(points: &[Vec<f64>], s: usize, rng: &mut R) -> Vec<f64> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(CENTROIDS * s);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&points[first]);
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    for _ in 1..CENTROIDS {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if *d > 0.0 && target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            while dist[chosen] == 0.0 && chosen > 0 {
                chosen -= 1;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = &points[pick];
        centroids.extend_from_slice(c);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, c));
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], centroids: &mut [f64], s: usize, iterations: usize, trace: &mut [f64]) {
    let n = points.len();
    let mut assign = vec![0usize; n];
    let mut err = vec![0.0; n];
    for slot in trace.iter_mut().take(iterations) {
        let mut total = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, centroids, s);
            assign[i] = c;
            err[i] = d;
            total += d;
        }
        *slot += total;
        let mut sums = vec![0.0; CENTROIDS * s];
        let mut counts = vec![0usize; CENTROIDS];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (acc, v) in sums[assign[i] * s..(assign[i] + 1) * s].iter_mut().zip(p) {
                *acc += v;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..CENTROIDS {
            if counts[c] > 0 {
                for k in 0..s {
                    centroids[c * s + k] = sums[c * s + k] / counts[c] as f64;
                }
                continue;
            }
            // empty cluster: move it onto the worst-served remaining point
            let mut far = None;
            for i in 0..n {
                if taken[i] {
                    continue;
                }
                if far.is_none_or(|f: usize| err[i] > err[f]) {
                    far = Some(i);
                }
            }
            if let Some(f) = far {
                taken[f] = true;
                err[f] = 0.0;
                centroids[c * s..(c + 1) * s].copy_from_slice(&points[f]);
            }
        }
    }
}

/// Trains a codebook with the default Lloyd budget.
pub fn pq_train(globals: &Matrix, sub_dim: usize, seed: u64) -> Result<PqCodebook> {
    pq_train_with(globals, &PqTrainConfig::new(sub_dim, seed)).map(|(cb, _)| cb)
}

/// Trains a codebook, returning the summed squared quantization error
/// (over all sub-spaces) measured at the start of each Lloyd iteration.
/// Centroids are rounded to `f32` so that a saved codebook decodes
/// identically.
pub fn pq_train_with(globals: &Matrix, config: &PqTrainConfig) -> Result<(PqCodebook, Vec<f64>)> {
    let (n, dim) = (globals.rows(), globals.cols());
    if n < 1 {
        return Err(AmesError::Empty("no vectors to train the codebook"));
    }
    let s = config.sub_dim;
    if s == 0 || dim % s != 0 {
        return Err(AmesError::Config("global dim must be divisible by the sub-space dim"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut all = Vec::with_capacity(dim * CENTROIDS);
    let mut trace = vec![0.0; config.iterations];
    for sub in 0..dim / s {
        let points: Vec<Vec<f64>> = (0..n).map(|i| globals.row(i)[sub * s..(sub + 1) * s].to_vec()).collect();
        let mut centroids = kmeans_pp(&points, s, &mut rng);
        lloyd(&points, &mut centroids, s, config.iterations, &mut trace);
        all.extend(centroids.into_iter().map(|c| c as f32 as f64));
    }
    Ok((PqCodebook { dim, sub_dim: s, centroids: all }, trace))
}

/// One byte per sub-space: the index of the nearest centroid.
pub fn pq_encode(v: &[f64], cb: &PqCodebook) -> Result<Vec<u8>> {
    if v.len() != cb.dim {
        return Err(AmesError::Shape { what: "global descriptor dim", expected: cb.dim, got: v.len() });
    }
    let s = cb.sub_dim;
    Ok((0..cb.num_subspaces())
        .map(|sub| {
            let cents = &cb.centroids[sub * CENTROIDS * s..(sub + 1) * CENTROIDS * s];
            nearest(&v[sub * s..(sub + 1) * s], cents, s).0 as u8
        })
        .collect())
}

pub fn pq_decode(code: &[u8], cb: &PqCodebook) -> Result<Vec<f64>> {
    if code.len() != cb.num_subspaces() {
        return Err(AmesError::Shape { what: "PQ code length", expected: cb.num_subspaces(), got: code.len() });
    }
    let mut out = Vec::with_capacity(cb.dim);
    for (sub, &c) in code.iter().enumerate() {
        out.extend_from_slice(cb.centroid(sub, c as usize));
    }
    Ok(out)
}

/// Mean squared reconstruction error over the rows of `x`.
pub fn reconstruction_mse(x: &Matrix, cb: &PqCodebook) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..x.rows() {
        let rec = pq_decode(&pq_encode(x.row(i), cb)?, cb)?;
        total += sq_dist(x.row(i), &rec);
    }
    Ok(total / (x.rows() * x.cols()) as f64)
}
