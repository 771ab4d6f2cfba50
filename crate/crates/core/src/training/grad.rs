//! Batch loss and exact reverse-mode gradients through the classifier,
//! the blocks and the (relaxed) projection.

use alloc::vec::Vec;

use super::loss::{balanced_weights, bce_loss, prefix_indices, score_distill_loss, token_distill_grad, token_distill_loss, trim_teacher_tokens, SCORE_CLAMP};
use crate::error::{AmesError, Result};
use crate::exec::{tree_reduce, Executor};
use crate::model::{backward, forward_cached, AmesParams};
use crate::numerics::{sigmoid, Matrix};

/// What the student is matched against during distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillMode {
    /// ℓ2 on the final tokens (teacher trimmed to the student's tokens).
    Tokens,
    /// Squared error on the final similarities.
    Scores,
}

/// Frozen full-precision teacher used to guide a student.
#[derive(Clone, Debug)]
pub struct DistillationSetup {
    pub teacher: AmesParams,
    pub mode: DistillMode,
}

impl DistillationSetup {
    pub fn new(teacher: AmesParams, mode: DistillMode) -> Result<Self> {
        if teacher.projection.is_binary() {
            return Err(AmesError::Config("the teacher must use the full-precision projection"));
        }
        Ok(Self { teacher, mode })
    }
}

/// One pair's inputs: full strength-ordered raw descriptors plus the
/// prefix lengths for the student and (optionally) the teacher.
#[derive(Clone, Copy, Debug)]
pub struct PairSpec<'a> {
    pub x: &'a Matrix,
    pub q: &'a Matrix,
    pub len_x: usize,
    pub len_q: usize,
    pub teacher_len_x: usize,
    pub teacher_len_q: usize,
    pub label: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    /// Label-balanced BCE.
    pub bce: f64,
    /// Mean distillation loss over pairs (0 without distillation).
    pub dis: f64,
}

#[derive(Clone, Copy, Debug, Default)]
struct PairTerms {
    bce: f64,
    dis: f64,
}

fn check_lengths(pair: &PairSpec<'_>, distill: bool) -> Result<()> {
    for (len, rows) in [(pair.len_x, pair.x.rows()), (pair.len_q, pair.q.rows())] {
        if len == 0 || len > rows {
            return Err(AmesError::LengthOutOfRange { got: len, min: 1, max: rows });
        }
    }
    if distill {
        if pair.teacher_len_x < pair.len_x || pair.teacher_len_x > pair.x.rows() {
            return Err(AmesError::LengthOutOfRange { got: pair.teacher_len_x, min: pair.len_x, max: pair.x.rows() });
        }
        if pair.teacher_len_q < pair.len_q || pair.teacher_len_q > pair.q.rows() {
            return Err(AmesError::LengthOutOfRange { got: pair.teacher_len_q, min: pair.len_q, max: pair.q.rows() });
        }
    }
    Ok(())
}

/// Forward (and, with `grads`, backward) for one pair. `w_bce` and `w_dis`
/// are this pair's weights in the batch objective.
fn pair_pass(
    params: &AmesParams,
    pair: &PairSpec<'_>,
    distill: Option<&DistillationSetup>,
    w_bce: f64,
    w_dis: f64,
    grads: Option<&mut AmesParams>,
) -> Result<PairTerms> {
    check_lengths(pair, distill.is_some())?;
    let xs = pair.x.slice_rows(0, pair.len_x);
    let qs = pair.q.slice_rows(0, pair.len_q);
    let (xp, xcache) = params.projection.project_train(&xs)?;
    let (qp, qcache) = params.projection.project_train(&qs)?;
    let (out, cache) = forward_cached(&xp, &qp, params)?;
    let score = sigmoid(out.logit);
    let bce = bce_loss(score, pair.label);
    let mut d_logit = if score > SCORE_CLAMP && score < 1.0 - SCORE_CLAMP { w_bce * (score - pair.label) } else { 0.0 };
    let mut d_tokens = None;
    let mut dis = 0.0;
    if let Some(setup) = distill {
        let teacher = &setup.teacher;
        let tx = teacher.projection.project(&pair.x.slice_rows(0, pair.teacher_len_x))?;
        let tq = teacher.projection.project(&pair.q.slice_rows(0, pair.teacher_len_q))?;
        let (tout, _) = forward_cached(&tx, &tq, teacher)?;
        match setup.mode {
            DistillMode::Tokens => {
                let idx = prefix_indices(pair.teacher_len_x, pair.len_x, pair.len_q);
                let trimmed = trim_teacher_tokens(&tout.tokens, &idx)?;
                dis = token_distill_loss(&trimmed, &out.tokens)?;
                d_tokens = Some(token_distill_grad(&trimmed, &out.tokens, w_dis));
            }
            DistillMode::Scores => {
                let ts = sigmoid(tout.logit);
                dis = score_distill_loss(ts, score);
                d_logit += w_dis * 2.0 * (score - ts) * score * (1.0 - score);
            }
        }
    }
    if let Some(g) = grads {
        let dinput = backward(params, &cache, &out, d_logit, d_tokens.as_ref(), g);
        params.projection.backward(&xcache, &dinput.x, &mut g.projection);
        params.projection.backward(&qcache, &dinput.q, &mut g.projection);
    }
    Ok(PairTerms { bce, dis })
}

const CHUNK: usize = 4;

fn weights(pairs: &[PairSpec<'_>], distill: bool, beta: f64) -> (Vec<f64>, f64) {
    let labels: Vec<f64> = pairs.iter().map(|p| p.label).collect();
    let w_dis = if distill && !pairs.is_empty() { beta / pairs.len() as f64 } else { 0.0 };
    (balanced_weights(&labels), w_dis)
}

fn combine(pairs: &[PairSpec<'_>], terms: &[PairTerms], wb: &[f64], distill: bool, beta: f64) -> Result<BatchLoss> {
    let bce: f64 = terms.iter().zip(wb).map(|(t, w)| w * t.bce).sum();
    let dis = if distill { terms.iter().map(|t| t.dis).sum::<f64>() / pairs.len() as f64 } else { 0.0 };
    let total = bce + beta * dis;
    if !total.is_finite() {
        return Err(AmesError::NonFiniteLoss { step: 0 });
    }
    Ok(BatchLoss { total, bce, dis })
}

/// Batch objective `balanced BCE + beta · mean distillation` without gradients.
pub fn batch_loss(params: &AmesParams, pairs: &[PairSpec<'_>], distill: Option<&DistillationSetup>, beta: f64) -> Result<BatchLoss> {
    if pairs.is_empty() {
        return Err(AmesError::Empty("batch"));
    }
    let distill = distill.filter(|_| beta != 0.0);
    let (wb, wd) = weights(pairs, distill.is_some(), beta);
    let terms = pairs.iter().zip(&wb).map(|(p, w)| pair_pass(params, p, distill, *w, wd, None)).collect::<Result<Vec<_>>>()?;
    combine(pairs, &terms, &wb, distill.is_some(), beta)
}

/// Batch objective and its gradient w.r.t. every trainable tensor.
/// Pairs are processed in fixed-size chunks whose partial gradients are
/// combined by a fixed pairwise tree, so results do not depend on the
/// executor's thread count. Distillation is skipped when `beta == 0`.
pub fn loss_gradients<E: Executor>(
    params: &AmesParams,
    pairs: &[PairSpec<'_>],
    distill: Option<&DistillationSetup>,
    beta: f64,
    exec: &E,
) -> Result<(BatchLoss, AmesParams)> {
    if pairs.is_empty() {
        return Err(AmesError::Empty("batch"));
    }
    let distill = distill.filter(|_| beta != 0.0);
    let (wb, wd) = weights(pairs, distill.is_some(), beta);
    let chunks = pairs.len().div_ceil(CHUNK);
    let partial = exec.map(chunks, |c| -> Result<(Vec<PairTerms>, AmesParams)> {
        let mut g = params.zeros_like();
        let mut terms = Vec::with_capacity(CHUNK);
        for i in c * CHUNK..((c + 1) * CHUNK).min(pairs.len()) {
            terms.push(pair_pass(params, &pairs[i], distill, wb[i], wd, Some(&mut g))?);
        }
        Ok((terms, g))
    });
    let mut terms = Vec::with_capacity(pairs.len());
    let mut grads = Vec::with_capacity(chunks);
    for p in partial {
        let (t, g) = p?;
        terms.extend(t);
        grads.push(g.to_flat());
    }
    let loss = combine(pairs, &terms, &wb, distill.is_some(), beta)?;
    let flat = tree_reduce(grads, |mut a, b| {
        for (x, y) in a.iter_mut().zip(&b) {
            *x += y;
        }
        a
    })
    .expect("non-empty batch");
    let mut out = params.zeros_like();
    out.load_flat(&flat)?;
    Ok((loss, out))
}
