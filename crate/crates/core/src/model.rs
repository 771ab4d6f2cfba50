//! The pairwise similarity network.
//!
//! Token layout is `[X tokens | Q tokens | matching token]`. Each block runs
//! a masked "self" attention (within-image), a masked "cross" attention
//! (across images) and a per-token MLP, all pre-norm with residuals. The
//! final matching token is scored by a linear classifier.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::Projection;
use crate::error::{AmesError, Result};
use crate::numerics::{
    dot, gelu, gelu_grad, layer_norm_rows, layer_norm_rows_backward, masked_attention_backward, masked_attention_cached, sigmoid, AttentionCache,
    AttentionMask, AttentionWeights, LayerNormCache, Linear, Matrix, LN_EPS,
};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        Self { gain: vec![1.0; dim], bias: vec![0.0; dim] }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { gain: vec![0.0; dim], bias: vec![0.0; dim] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub self_norm: LayerNormParams,
    pub self_attn: AttentionWeights,
    pub cross_norm: LayerNormParams,
    pub cross_attn: AttentionWeights,
    pub ffn_norm: LayerNormParams,
    pub ffn: FeedForward,
}

impl BlockParams {
    /// All projections zero, layer norms neutral.
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            self_norm: LayerNormParams::identity(dim),
            self_attn: AttentionWeights::zeros(dim),
            cross_norm: LayerNormParams::identity(dim),
            cross_attn: AttentionWeights::zeros(dim),
            ffn_norm: LayerNormParams::identity(dim),
            ffn: FeedForward { up: Linear::zeros(dim, hidden), down: Linear::zeros(hidden, dim) },
        }
    }

    fn zeroed_like(&self) -> Self {
        let dim = self.self_norm.gain.len();
        let hidden = self.ffn.up.bias.len();
        let mut b = Self::zeros(dim, hidden);
        for n in [&mut b.self_norm, &mut b.cross_norm, &mut b.ffn_norm] {
            n.gain.iter_mut().for_each(|g| *g = 0.0);
        }
        b
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Raw descriptor dimension D.
    pub input_dim: usize,
    /// Token dimension d.
    pub dim: usize,
    /// Number of blocks N.
    pub depth: usize,
    pub heads: usize,
    /// MLP hidden width.
    pub hidden: usize,
}

impl ModelConfig {
    pub fn new(input_dim: usize, dim: usize, depth: usize, heads: usize) -> Self {
        Self { input_dim, dim, depth, heads, hidden: 4 * dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.input_dim == 0 || self.hidden == 0 {
            return Err(AmesError::Config("dimensions must be positive"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(AmesError::Config("model dim must be divisible by the head count"));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(128, 128, 5, 4)
    }
}

/// All learnable parameters. The same type is used to hold gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct AmesParams {
    pub config: ModelConfig,
    pub blocks: Vec<BlockParams>,
    pub matching_token: Vec<f64>,
    pub classifier: Vec<f64>,
    pub projection: Projection,
}

fn fill_normal<R: Rng + ?Sized>(values: &mut [f64], std: f64, rng: &mut R) {
    let dist = Normal::new(0.0, std).expect("finite std");
    for v in values {
        *v = dist.sample(rng);
    }
}

pub(crate) fn init_linear<R: Rng + ?Sized>(lin: &mut Linear, rng: &mut R) {
    let (fan_in, fan_out) = (lin.weight.rows(), lin.weight.cols());
    let std = libm::sqrt(2.0 / (fan_in + fan_out) as f64);
    fill_normal(lin.weight.as_mut_slice(), std, rng);
    lin.bias.iter_mut().for_each(|b| *b = 0.0);
}

impl AmesParams {
    /// Random initialization around the supplied projection.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, projection: Projection, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if projection.input_dim() != config.input_dim || projection.output_dim() != config.dim {
            return Err(AmesError::Shape { what: "projection output dim", expected: config.dim, got: projection.output_dim() });
        }
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let mut b = BlockParams::zeros(config.dim, config.hidden);
            for att in [&mut b.self_attn, &mut b.cross_attn] {
                for lin in [&mut att.query, &mut att.key, &mut att.value, &mut att.output] {
                    init_linear(lin, rng);
                }
            }
            init_linear(&mut b.ffn.up, rng);
            init_linear(&mut b.ffn.down, rng);
            blocks.push(b);
        }
        let mut matching_token = vec![0.0; config.dim];
        fill_normal(&mut matching_token, 0.02, rng);
        let mut classifier = vec![0.0; config.dim];
        fill_normal(&mut classifier, libm::sqrt(1.0 / config.dim as f64), rng);
        Ok(Self { config, blocks, matching_token, classifier, projection })
    }

    /// Every tensor zero except layer-norm gains (one) and the projection,
    /// which is kept as given.
    pub fn zeros(config: ModelConfig, projection: Projection) -> Self {
        Self {
            config,
            blocks: (0..config.depth).map(|_| BlockParams::zeros(config.dim, config.hidden)).collect(),
            matching_token: vec![0.0; config.dim],
            classifier: vec![0.0; config.dim],
            projection,
        }
    }

    /// Same structure with every trainable value set to zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            blocks: self.blocks.iter().map(BlockParams::zeroed_like).collect(),
            matching_token: vec![0.0; self.config.dim],
            classifier: vec![0.0; self.config.dim],
            projection: self.projection.zeros_like(),
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn heads(&self) -> usize {
        self.config.heads
    }

    /// Visits every trainable tensor in the canonical order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.projection.visit("projection", f);
        for (i, b) in self.blocks.iter().enumerate() {
            visit_block(b, &format!("blocks.{i}"), f);
        }
        f("matching_token", &self.matching_token);
        f("classifier", &self.classifier);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.projection.visit_mut("projection", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_block_mut(b, &format!("blocks.{i}"), f);
        }
        f("matching_token", &mut self.matching_token);
        f("classifier", &mut self.classifier);
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(String::from(n)));
        names
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        self.visit(&mut |_, t| out.extend_from_slice(t));
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_parameters();
        if flat.len() != n {
            return Err(AmesError::Shape { what: "flat parameter vector", expected: n, got: flat.len() });
        }
        let mut off = 0;
        self.visit_mut(&mut |_, t| {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        });
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }
}

pub(crate) fn visit_linear(l: &Linear, name: &str, f: &mut dyn FnMut(&str, &[f64])) {
    f(&format!("{name}.weight"), l.weight.as_slice());
    f(&format!("{name}.bias"), &l.bias);
}

pub(crate) fn visit_linear_mut(l: &mut Linear, name: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
    f(&format!("{name}.weight"), l.weight.as_mut_slice());
    f(&format!("{name}.bias"), &mut l.bias);
}

pub(crate) fn visit_norm(n: &LayerNormParams, name: &str, f: &mut dyn FnMut(&str, &[f64])) {
    f(&format!("{name}.gain"), &n.gain);
    f(&format!("{name}.bias"), &n.bias);
}

pub(crate) fn visit_norm_mut(n: &mut LayerNormParams, name: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
    f(&format!("{name}.gain"), &mut n.gain);
    f(&format!("{name}.bias"), &mut n.bias);
}

fn visit_attention(a: &AttentionWeights, name: &str, f: &mut dyn FnMut(&str, &[f64])) {
    visit_linear(&a.query, &format!("{name}.query"), f);
    visit_linear(&a.key, &format!("{name}.key"), f);
    visit_linear(&a.value, &format!("{name}.value"), f);
    visit_linear(&a.output, &format!("{name}.output"), f);
}

fn visit_attention_mut(a: &mut AttentionWeights, name: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
    visit_linear_mut(&mut a.query, &format!("{name}.query"), f);
    visit_linear_mut(&mut a.key, &format!("{name}.key"), f);
    visit_linear_mut(&mut a.value, &format!("{name}.value"), f);
    visit_linear_mut(&mut a.output, &format!("{name}.output"), f);
}

fn visit_block(b: &BlockParams, name: &str, f: &mut dyn FnMut(&str, &[f64])) {
    visit_norm(&b.self_norm, &format!("{name}.self_norm"), f);
    visit_attention(&b.self_attn, &format!("{name}.self_attn"), f);
    visit_norm(&b.cross_norm, &format!("{name}.cross_norm"), f);
    visit_attention(&b.cross_attn, &format!("{name}.cross_attn"), f);
    visit_norm(&b.ffn_norm, &format!("{name}.ffn_norm"), f);
    visit_linear(&b.ffn.up, &format!("{name}.ffn.up"), f);
    visit_linear(&b.ffn.down, &format!("{name}.ffn.down"), f);
}

fn visit_block_mut(b: &mut BlockParams, name: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
    visit_norm_mut(&mut b.self_norm, &format!("{name}.self_norm"), f);
    visit_attention_mut(&mut b.self_attn, &format!("{name}.self_attn"), f);
    visit_norm_mut(&mut b.cross_norm, &format!("{name}.cross_norm"), f);
    visit_attention_mut(&mut b.cross_attn, &format!("{name}.cross_attn"), f);
    visit_norm_mut(&mut b.ffn_norm, &format!("{name}.ffn_norm"), f);
    visit_linear_mut(&mut b.ffn.up, &format!("{name}.ffn.up"), f);
    visit_linear_mut(&mut b.ffn.down, &format!("{name}.ffn.down"), f);
}

/// Self (within-image) and cross (across-image) attention masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPair {
    pub self_mask: AttentionMask,
    pub cross_mask: AttentionMask,
    pub len_x: usize,
    pub len_q: usize,
}

impl MaskPair {
    pub fn size(&self) -> usize {
        self.self_mask.size()
    }
}

/// Masks for `len_x + len_q + 1` tokens. The matching token (last) row and
/// column are all ones; the diagonal is allowed in both masks.
pub fn build_masks(len_x: usize, len_q: usize) -> Result<MaskPair> {
    build_padded_masks(len_x, len_q, len_x, len_q)
}

/// Masks for a padded layout `[X (pad_x rows) | Q (pad_q rows) | t]` where
/// only the first `len_x` / `len_q` rows of each segment are real. Padding
/// tokens attend only to themselves and are invisible to every other row.
pub fn build_padded_masks(len_x: usize, len_q: usize, pad_x: usize, pad_q: usize) -> Result<MaskPair> {
    if len_x == 0 || len_q == 0 {
        return Err(AmesError::EmptyDescriptorSet);
    }
    if len_x > pad_x || len_q > pad_q {
        return Err(AmesError::Config("padded length shorter than descriptor count"));
    }
    let k = pad_x + pad_q + 1;
    let t = k - 1;
    // 0 = X, 1 = Q, 2 = matching token, 3 = padding
    let segment = |i: usize| -> u8 {
        if i == t {
            2
        } else if i < pad_x {
            if i < len_x {
                0
            } else {
                3
            }
        } else if i - pad_x < len_q {
            1
        } else {
            3
        }
    };
    let make = |same_image: bool| {
        AttentionMask::from_fn(k, |i, j| {
            if i == j {
                return true;
            }
            let (si, sj) = (segment(i), segment(j));
            if si == 3 || sj == 3 {
                return false;
            }
            if si == 2 || sj == 2 {
                return true;
            }
            (si == sj) == same_image
        })
    };
    Ok(MaskPair { self_mask: make(true), cross_mask: make(false), len_x, len_q })
}

/// Result of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `t_N · w`.
    pub logit: f64,
    /// Final tokens Z_N, K×d.
    pub tokens: Matrix,
    /// Dot product of each descriptor token with the final matching token.
    pub importances: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    self_norm: LayerNormCache,
    self_attn: AttentionCache,
    cross_norm: LayerNormCache,
    cross_attn: AttentionCache,
    ffn_norm: LayerNormCache,
    ffn_in: Matrix,
    ffn_pre: Matrix,
    ffn_act: Matrix,
}

/// Everything needed to back-propagate through [`forward_cached`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    len_x: usize,
    len_q: usize,
}

impl ForwardCache {
    pub fn len_x(&self) -> usize {
        self.len_x
    }

    pub fn len_q(&self) -> usize {
        self.len_q
    }
}

fn block_forward_cached(z: &Matrix, p: &BlockParams, masks: &MaskPair, heads: usize) -> Result<(Matrix, BlockCache)> {
    if z.rows() != masks.size() {
        return Err(AmesError::Shape { what: "block token count", expected: masks.size(), got: z.rows() });
    }
    let (n1, ln1) = layer_norm_rows(z, &p.self_norm.gain, &p.self_norm.bias, LN_EPS);
    let (a, att_s) = masked_attention_cached(&n1, &masks.self_mask, &p.self_attn, heads)?;
    let mut hat = z.clone();
    hat.add_assign(&a);

    let (n2, ln2) = layer_norm_rows(&hat, &p.cross_norm.gain, &p.cross_norm.bias, LN_EPS);
    let (c, att_c) = masked_attention_cached(&n2, &masks.cross_mask, &p.cross_attn, heads)?;
    let mut tilde = hat;
    tilde.add_assign(&c);

    let (n3, ln3) = layer_norm_rows(&tilde, &p.ffn_norm.gain, &p.ffn_norm.bias, LN_EPS);
    let pre = p.ffn.up.forward(&n3)?;
    let mut act = pre.clone();
    act.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
    let f = p.ffn.down.forward(&act)?;
    let mut out = tilde;
    out.add_assign(&f);
    Ok((out, BlockCache { self_norm: ln1, self_attn: att_s, cross_norm: ln2, cross_attn: att_c, ffn_norm: ln3, ffn_in: n3, ffn_pre: pre, ffn_act: act }))
}

fn block_backward(cache: &BlockCache, p: &BlockParams, heads: usize, dout: &Matrix, g: &mut BlockParams) -> Matrix {
    // Z' = Z̃ + down(gelu(up(LN3(Z̃))))
    let mut dtilde = dout.clone();
    let mut dact = p.ffn.down.backward(&cache.ffn_act, dout, &mut g.ffn.down);
    for (d, x) in dact.as_mut_slice().iter_mut().zip(cache.ffn_pre.as_slice()) {
        *d *= gelu_grad(*x);
    }
    let dn3 = p.ffn.up.backward(&cache.ffn_in, &dact, &mut g.ffn.up);
    dtilde.add_assign(&layer_norm_rows_backward(&cache.ffn_norm, &p.ffn_norm.gain, &dn3, &mut g.ffn_norm.gain, &mut g.ffn_norm.bias));

    // Z̃ = Ẑ + cross(LN2(Ẑ))
    let mut dhat = dtilde.clone();
    let dn2 = masked_attention_backward(&cache.cross_attn, &p.cross_attn, heads, &dtilde, &mut g.cross_attn);
    dhat.add_assign(&layer_norm_rows_backward(&cache.cross_norm, &p.cross_norm.gain, &dn2, &mut g.cross_norm.gain, &mut g.cross_norm.bias));

    // Ẑ = Z + self(LN1(Z))
    let mut dz = dhat.clone();
    let dn1 = masked_attention_backward(&cache.self_attn, &p.self_attn, heads, &dhat, &mut g.self_attn);
    dz.add_assign(&layer_norm_rows_backward(&cache.self_norm, &p.self_norm.gain, &dn1, &mut g.self_norm.gain, &mut g.self_norm.bias));
    dz
}

/// One block: self attention, cross attention, MLP, each with a residual.
pub fn forward_block(z: &Matrix, params: &BlockParams, masks: &MaskPair, heads: usize) -> Result<Matrix> {
    block_forward_cached(z, params, masks, heads).map(|(z, _)| z)
}

fn assemble_tokens(x_proj: &Matrix, q_proj: &Matrix, token: &[f64], dim: usize) -> Result<Matrix> {
    if x_proj.rows() == 0 || q_proj.rows() == 0 {
        return Err(AmesError::EmptyDescriptorSet);
    }
    for m in [x_proj, q_proj] {
        if m.cols() != dim {
            return Err(AmesError::Shape { what: "projected descriptor dim", expected: dim, got: m.cols() });
        }
    }
    let t = Matrix::from_vec(1, dim, token.to_vec())?;
    Matrix::vstack(&[x_proj, q_proj, &t])
}

fn finish(tokens: Matrix, classifier: &[f64]) -> ForwardOutput {
    let k = tokens.rows();
    let t_n = tokens.row(k - 1);
    let logit = dot(t_n, classifier);
    let importances = (0..k - 1).map(|j| dot(tokens.row(j), t_n)).collect();
    ForwardOutput { logit, tokens, importances }
}

/// Forward pass on already-projected descriptor sets.
pub fn ames_forward(x_proj: &Matrix, q_proj: &Matrix, params: &AmesParams) -> Result<ForwardOutput> {
    forward_cached(x_proj, q_proj, params).map(|(o, _)| o)
}

pub fn forward_cached(x_proj: &Matrix, q_proj: &Matrix, params: &AmesParams) -> Result<(ForwardOutput, ForwardCache)> {
    let mut z = assemble_tokens(x_proj, q_proj, &params.matching_token, params.dim())?;
    let masks = build_masks(x_proj.rows(), q_proj.rows())?;
    let mut caches = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (next, cache) = block_forward_cached(&z, b, &masks, params.heads())?;
        caches.push(cache);
        z = next;
    }
    Ok((finish(z, &params.classifier), ForwardCache { blocks: caches, len_x: x_proj.rows(), len_q: q_proj.rows() }))
}

/// Forward pass with both sets zero-padded to fixed lengths; padding is
/// masked out of both attention masks. Returned tokens keep the padded
/// layout and importances cover every non-matching row.
pub fn forward_padded(x_proj: &Matrix, q_proj: &Matrix, pad_x: usize, pad_q: usize, params: &AmesParams) -> Result<ForwardOutput> {
    let d = params.dim();
    let mut xp = Matrix::zeros(pad_x, d);
    let mut qp = Matrix::zeros(pad_q, d);
    if x_proj.rows() > pad_x || q_proj.rows() > pad_q {
        return Err(AmesError::Config("padded length shorter than descriptor count"));
    }
    for i in 0..x_proj.rows() {
        xp.row_mut(i).copy_from_slice(x_proj.row(i));
    }
    for i in 0..q_proj.rows() {
        qp.row_mut(i).copy_from_slice(q_proj.row(i));
    }
    let mut z = assemble_tokens(&xp, &qp, &params.matching_token, d)?;
    let masks = build_padded_masks(x_proj.rows(), q_proj.rows(), pad_x, pad_q)?;
    for b in &params.blocks {
        z = forward_block(&z, b, &masks, params.heads())?;
    }
    Ok(finish(z, &params.classifier))
}

/// Gradients w.r.t. the projected inputs.
#[derive(Clone, Debug)]
pub struct InputGradients {
    pub x: Matrix,
    pub q: Matrix,
}

/// Back-propagates `d_logit` (and optionally a gradient on the final
/// tokens) through the blocks. Block, matching-token and classifier
/// gradients are accumulated into `grads`.
pub fn backward(
    params: &AmesParams,
    cache: &ForwardCache,
    output: &ForwardOutput,
    d_logit: f64,
    d_tokens: Option<&Matrix>,
    grads: &mut AmesParams,
) -> InputGradients {
    let z = &output.tokens;
    let k = z.rows();
    let d = params.dim();
    let mut dz = match d_tokens {
        Some(m) => m.clone(),
        None => Matrix::zeros(k, d),
    };
    let t_n = z.row(k - 1);
    for j in 0..d {
        grads.classifier[j] += d_logit * t_n[j];
        dz[(k - 1, j)] += d_logit * params.classifier[j];
    }
    for (i, b) in params.blocks.iter().enumerate().rev() {
        dz = block_backward(&cache.blocks[i], b, params.heads(), &dz, &mut grads.blocks[i]);
    }
    for j in 0..d {
        grads.matching_token[j] += dz[(k - 1, j)];
    }
    let (lx, lq) = (cache.len_x, cache.len_q);
    InputGradients { x: dz.slice_rows(0, lx), q: dz.slice_rows(lx, lx + lq) }
}

/// `sigmoid(gamma · logit)`.
#[inline]
pub fn ames_score(logit: f64, gamma: f64) -> f64 {
    sigmoid(gamma * logit)
}
