//! Dense kernels shared by the model, codec and training code.
//!
//! Everything here works on row-major `f64` matrices. Attention masking is
//! additive: masked logits receive [`MASK_BIAS`] before the softmax, and the
//! row maximum is taken over unmasked entries only so that masked positions
//! get exactly zero weight.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{AmesError, Result};

/// Additive bias applied to masked attention logits.
pub const MASK_BIAS: f64 = -1e9;

/// Default layer-normalization epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AmesError::Shape { what: "matrix data", expected: rows * cols, got: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(AmesError::Shape { what: "matrix row", expected: cols, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix { rows: end - start, cols: self.cols, data: self.data[start * self.cols..end * self.cols].to_vec() }
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(AmesError::Shape { what: "vstack columns", expected: cols, got: p.cols });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) {
        debug_assert_eq!(bias.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
    }

    /// Sum over rows, one value per column.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.data.chunks_exact(self.cols.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(AmesError::Shape { what: "matmul inner dim", expected: self.cols, got: other.rows });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        matmul_into(&self.data, &other.data, &mut out.data, self.rows, self.cols, other.cols);
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(AmesError::Shape { what: "t_matmul rows", expected: self.rows, got: other.rows });
        }
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        for r in 0..k {
            let a = &self.data[r * m..(r + 1) * m];
            let b = &other.data[r * n..(r + 1) * n];
            for (i, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let o = &mut out.data[i * n..(i + 1) * n];
                for (ov, bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(AmesError::Shape { what: "matmul_t cols", expected: self.cols, got: other.cols });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }
}

impl core::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl core::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `out += a (m×k) · b (k×n)`, row-major, i-k-j order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (ov, bv) in o.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
}

/// Dot product over the common prefix, summed in four interleaved lanes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

pub fn l2_normalize(v: &mut [f64]) {
    let n = libm::sqrt(dot(v, v));
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Error function.
#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

/// Layer normalization of a single vector.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / libm::sqrt(var + eps);
    x.iter().zip(gain.iter().zip(bias)).map(|(v, (g, b))| (v - mean) * inv * g + b).collect()
}

/// Row-wise layer norm with the statistics needed by the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    /// Normalized rows before the affine map.
    pub normed: Matrix,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm_rows(x: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> (Matrix, LayerNormCache) {
    let (rows, cols) = (x.rows(), x.cols());
    let mut normed = Matrix::zeros(rows, cols);
    let mut out = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    let n = cols as f64;
    for i in 0..rows {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / libm::sqrt(var + eps);
        inv_std.push(inv);
        let nr = normed.row_mut(i);
        for (o, v) in nr.iter_mut().zip(r) {
            *o = (v - mean) * inv;
        }
        let or = out.row_mut(i);
        for j in 0..cols {
            or[j] = normed[(i, j)] * gain[j] + bias[j];
        }
    }
    (out, LayerNormCache { normed, inv_std })
}

/// Backward of [`layer_norm_rows`]: returns `dx` and accumulates gain/bias gradients.
pub fn layer_norm_rows_backward(cache: &LayerNormCache, gain: &[f64], dout: &Matrix, dgain: &mut [f64], dbias: &mut [f64]) -> Matrix {
    let (rows, cols) = (dout.rows(), dout.cols());
    let n = cols as f64;
    let mut dx = Matrix::zeros(rows, cols);
    let mut dn = vec![0.0; cols];
    for i in 0..rows {
        let dr = dout.row(i);
        let nr = cache.normed.row(i);
        for j in 0..cols {
            dgain[j] += dr[j] * nr[j];
            dbias[j] += dr[j];
            dn[j] = dr[j] * gain[j];
        }
        let mean_dn = dn.iter().sum::<f64>() / n;
        let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / n;
        let inv = cache.inv_std[i];
        let xr = dx.row_mut(i);
        for j in 0..cols {
            xr[j] = inv * (dn[j] - mean_dn - nr[j] * mean_dn_n);
        }
    }
    dx
}

/// Square binary attention mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                bits.push(f(i, j));
            }
        }
        Self { size, bits }
    }

    pub fn ones(size: usize) -> Self {
        Self { size, bits: vec![true; size * size] }
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.size + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.size + j] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.size..(i + 1) * self.size]
    }
}

/// Linear-layer weights stored input-major (`x · weight + bias`).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Matrix::zeros(input, output), bias: vec![0.0; output] }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        y.add_row_vector(&self.bias);
        Ok(y)
    }

    /// Accumulates weight/bias gradients into `grad`; returns `dx`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) -> Matrix {
        let dw = x.t_matmul(dy).expect("linear backward shapes");
        grad.weight.add_assign(&dw);
        for (g, v) in grad.bias.iter_mut().zip(dy.column_sums()) {
            *g += v;
        }
        dy.matmul_t(&self.weight).expect("linear backward shapes")
    }
}

/// Multi-head attention projections.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionWeights {
    pub fn zeros(dim: usize) -> Self {
        Self { query: Linear::zeros(dim, dim), key: Linear::zeros(dim, dim), value: Linear::zeros(dim, dim), output: Linear::zeros(dim, dim) }
    }
}

/// Intermediate values kept for [`masked_attention_backward`].
#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub input: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// One K×K probability matrix per head.
    pub probs: Vec<Matrix>,
    /// Concatenated head outputs (input to the output projection).
    pub context: Matrix,
}

fn check_attention_shapes(tokens: &Matrix, mask: &AttentionMask, weights: &AttentionWeights, heads: usize) -> Result<()> {
    let d = tokens.cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(AmesError::Config("model dim must be divisible by the head count"));
    }
    if mask.size() != tokens.rows() {
        return Err(AmesError::Shape { what: "attention mask size", expected: tokens.rows(), got: mask.size() });
    }
    if weights.query.weight.rows() != d {
        return Err(AmesError::Shape { what: "attention weight rows", expected: d, got: weights.query.weight.rows() });
    }
    Ok(())
}

/// Columns `off..off + width` of `m` as a contiguous row-major block.
fn head_columns(m: &Matrix, off: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.rows() * width);
    for i in 0..m.rows() {
        out.extend_from_slice(&m.row(i)[off..off + width]);
    }
    out
}

/// Multi-head scaled dot-product attention restricted by `mask`.
pub fn masked_attention(tokens: &Matrix, mask: &AttentionMask, weights: &AttentionWeights, heads: usize) -> Result<Matrix> {
    masked_attention_cached(tokens, mask, weights, heads).map(|(out, _)| out)
}

pub fn masked_attention_cached(tokens: &Matrix, mask: &AttentionMask, weights: &AttentionWeights, heads: usize) -> Result<(Matrix, AttentionCache)> {
    check_attention_shapes(tokens, mask, weights, heads)?;
    let kk = tokens.rows();
    let d = tokens.cols();
    let dh = d / heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let q = weights.query.forward(tokens)?;
    let k = weights.key.forward(tokens)?;
    let v = weights.value.forward(tokens)?;
    let mut context = Matrix::zeros(kk, d);
    let mut probs = Vec::with_capacity(heads);
    let mut logits = vec![0.0; kk];
    let mut ctx = vec![0.0; dh];
    for h in 0..heads {
        let off = h * dh;
        let qh = head_columns(&q, off, dh);
        let kh = head_columns(&k, off, dh);
        let vh = head_columns(&v, off, dh);
        let mut p = Matrix::zeros(kk, kk);
        for i in 0..kk {
            let qi = &qh[i * dh..(i + 1) * dh];
            let mrow = mask.row(i);
            let mut max = f64::NEG_INFINITY;
            for (j, (l, &allowed)) in logits.iter_mut().zip(mrow).enumerate() {
                // masked entries sit MASK_BIAS below the row max and
                // underflow to exactly zero, so their score is not needed
                if allowed {
                    let s = dot(qi, &kh[j * dh..(j + 1) * dh]) * scale;
                    *l = s;
                    if s > max {
                        max = s;
                    }
                } else {
                    *l = MASK_BIAS;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(AmesError::FullyMaskedRow(i));
            }
            let prow = p.row_mut(i);
            let mut sum = 0.0;
            for ((pv, &l), &allowed) in prow.iter_mut().zip(&logits).zip(mrow) {
                let e = if allowed { libm::exp(l - max) } else { 0.0 };
                *pv = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            ctx.iter_mut().for_each(|c| *c = 0.0);
            for (j, pv) in prow.iter_mut().enumerate() {
                if *pv == 0.0 {
                    continue;
                }
                *pv *= inv;
                let w = *pv;
                for (c, vv) in ctx.iter_mut().zip(&vh[j * dh..(j + 1) * dh]) {
                    *c += w * vv;
                }
            }
            context.row_mut(i)[off..off + dh].copy_from_slice(&ctx);
        }
        probs.push(p);
    }
    let out = weights.output.forward(&context)?;
    Ok((out, AttentionCache { input: tokens.clone(), q, k, v, probs, context }))
}

/// Backward pass of [`masked_attention_cached`]. Accumulates parameter
/// gradients into `grad` and returns the gradient w.r.t. the input tokens.
pub fn masked_attention_backward(cache: &AttentionCache, weights: &AttentionWeights, heads: usize, dout: &Matrix, grad: &mut AttentionWeights) -> Matrix {
    let kk = dout.rows();
    let d = dout.cols();
    let dh = d / heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let dcontext = weights.output.backward(&cache.context, dout, &mut grad.output);
    let mut dq = Matrix::zeros(kk, d);
    let mut dk = Matrix::zeros(kk, d);
    let mut dv = Matrix::zeros(kk, d);
    let mut dp = vec![0.0; kk];
    for h in 0..heads {
        let off = h * dh;
        let p = &cache.probs[h];
        for i in 0..kk {
            let dci = &dcontext.row(i)[off..off + dh];
            let prow = p.row(i);
            // dV += pᵢⱼ dcᵢ ; dP = dc · vⱼ
            let mut weighted = 0.0;
            for j in 0..kk {
                let w = prow[j];
                if w == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                let vj = &cache.v.row(j)[off..off + dh];
                dp[j] = dot(dci, vj);
                weighted += w * dp[j];
                let dvj = &mut dv.row_mut(j)[off..off + dh];
                for (a, b) in dvj.iter_mut().zip(dci) {
                    *a += w * b;
                }
            }
            let qi = cache.q.row(i)[off..off + dh].to_vec();
            for j in 0..kk {
                let w = prow[j];
                if w == 0.0 {
                    continue;
                }
                let ds = w * (dp[j] - weighted) * scale;
                let kj = &cache.k.row(j)[off..off + dh];
                let dqi = &mut dq.row_mut(i)[off..off + dh];
                for (a, b) in dqi.iter_mut().zip(kj) {
                    *a += ds * b;
                }
                let dkj = &mut dk.row_mut(j)[off..off + dh];
                for (a, b) in dkj.iter_mut().zip(&qi) {
                    *a += ds * b;
                }
            }
        }
    }
    let mut dx = weights.query.backward(&cache.input, &dq, &mut grad.query);
    dx.add_assign(&weights.key.backward(&cache.input, &dk, &mut grad.key));
    dx.add_assign(&weights.value.backward(&cache.input, &dv, &mut grad.value));
    dx
}
