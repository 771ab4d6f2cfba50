use alloc::vec::Vec;

use crate::error::{AmesError, Result};
use crate::numerics::Matrix;

/// Scores are clamped to `[SCORE_CLAMP, 1 - SCORE_CLAMP]` before the log.
pub const SCORE_CLAMP: f64 = 1e-7;

/// Binary cross-entropy of one score against a 0/1 label.
pub fn bce_loss(score: f64, label: f64) -> f64 {
    let s = score.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    -label * libm::log(s) - (1.0 - label) * libm::log(1.0 - s)
}

/// Per-pair weights giving positives and negatives equal total weight.
/// If only one class is present, its pairs are averaged.
pub fn balanced_weights(labels: &[f64]) -> Vec<f64> {
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    let neg = labels.len() - pos;
    let (wp, wn) = match (pos, neg) {
        (0, 0) => (0.0, 0.0),
        (0, n) => (0.0, 1.0 / n as f64),
        (p, 0) => (1.0 / p as f64, 0.0),
        (p, n) => (0.5 / p as f64, 0.5 / n as f64),
    };
    labels.iter().map(|&y| if y > 0.5 { wp } else { wn }).collect()
}

/// Label-balanced mean BCE over `(score, label)` pairs.
pub fn balanced_bce(pairs: &[(f64, f64)]) -> f64 {
    let labels: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    balanced_weights(&labels).iter().zip(pairs).map(|(w, &(s, y))| w * bce_loss(s, y)).sum()
}

/// `bce + beta · dis`.
#[inline]
pub fn total_loss(bce: f64, dis: f64, beta: f64) -> f64 {
    bce + beta * dis
}

/// Teacher rows corresponding to the student tokens, followed by the
/// teacher's matching token.
pub fn trim_teacher_tokens(teacher: &Matrix, student_indices: &[usize]) -> Result<Matrix> {
    let k = teacher.rows();
    let mut out = Matrix::zeros(student_indices.len() + 1, teacher.cols());
    for (dst, &src) in student_indices.iter().enumerate() {
        if src >= k - 1 {
            return Err(AmesError::IndexOutOfRange { index: src, len: k - 1 });
        }
        out.row_mut(dst).copy_from_slice(teacher.row(src));
    }
    out.row_mut(student_indices.len()).copy_from_slice(teacher.row(k - 1));
    Ok(out)
}

/// Teacher token indices for student prefixes of lengths
/// `(student_x, student_q)` inside a teacher layout `[teacher_x | teacher_q | t]`.
pub fn prefix_indices(teacher_x: usize, student_x: usize, student_q: usize) -> Vec<usize> {
    (0..student_x).chain(teacher_x..teacher_x + student_q).collect()
}

/// Token-space distillation `‖Z̄_t − Z_s‖_F / (d · K_s)` on already
/// trimmed teacher tokens.
pub fn token_distill_loss(trimmed_teacher: &Matrix, student: &Matrix) -> Result<f64> {
    if trimmed_teacher.rows() != student.rows() || trimmed_teacher.cols() != student.cols() {
        return Err(AmesError::Shape { what: "distillation tokens", expected: trimmed_teacher.rows(), got: student.rows() });
    }
    let norm = (student.rows() * student.cols()) as f64;
    let sq: f64 = trimmed_teacher.as_slice().iter().zip(student.as_slice()).map(|(t, s)| (t - s) * (t - s)).sum();
    Ok(sq.sqrt() / norm)
}

/// Gradient of [`token_distill_loss`] w.r.t. the student tokens.
pub fn token_distill_grad(trimmed_teacher: &Matrix, student: &Matrix, weight: f64) -> Matrix {
    let norm = (student.rows() * student.cols()) as f64;
    let mut g = student.clone();
    let residual: f64 = student.as_slice().iter().zip(trimmed_teacher.as_slice()).map(|(s, t)| (s - t) * (s - t)).sum::<f64>().sqrt();
    // the norm has no gradient at zero; take the zero subgradient
    let scale = if residual > 0.0 { weight / (norm * residual) } else { 0.0 };
    for (v, t) in g.as_mut_slice().iter_mut().zip(trimmed_teacher.as_slice()) {
        *v = scale * (*v - t);
    }
    g
}

/// Score-space distillation: squared difference of final similarities.
#[inline]
pub fn score_distill_loss(teacher_score: f64, student_score: f64) -> f64 {
    (student_score - teacher_score) * (student_score - teacher_score)
}
