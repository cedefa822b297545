//! Less-forget constraint and margin ranking on L2-normalized logits.
//!
//! Both terms operate on `v / ‖v‖` of the raw logit vector. The normalized
//! score of class `c` plays the role of the similarity between the sample's
//! normalized embedding and the class embedding.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::losses::LossGrad;
use crate::nn::{dot, l2_normalize, Matrix};

/// Per-sample loss with gradient w.r.t. the raw (unnormalized) vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub degenerate: bool,
}

/// Pulls `g`, a gradient w.r.t. `v̂ = v/‖v‖`, back to `v`:
/// `(g − (g·v̂) v̂) / ‖v‖`.
fn through_normalization(g: &[f64], unit: &[f64], norm: f64) -> Vec<f64> {
    let proj = dot(g, unit);
    g.iter()
        .zip(unit)
        .map(|(gi, ui)| (gi - proj * ui) / norm)
        .collect()
}

/// `1 − ⟨f̂*, f̂⟩`; the gradient flows into `new_features` only.
pub fn lucir_dis(old_features: &[f64], new_features: &[f64]) -> Result<VectorLoss> {
    if old_features.len() != new_features.len() {
        return Err(Error::shape(
            "lucir_dis",
            old_features.len(),
            new_features.len(),
        ));
    }
    let old = l2_normalize(old_features);
    let new = l2_normalize(new_features);
    if old.degenerate || new.degenerate {
        return Ok(VectorLoss {
            loss: 0.0,
            grad: vec![0.0; new_features.len()],
            degenerate: true,
        });
    }
    let cos = dot(&old.values, &new.values);
    let g: Vec<f64> = old.values.iter().map(|v| -v).collect();
    Ok(VectorLoss {
        loss: 1.0 - cos,
        grad: through_normalization(&g, &new.values, new.norm),
        degenerate: false,
    })
}

/// Hinge over the `top_k` highest-scoring classes in `negatives`:
/// `Σ_k max(margin − s_gt + s_k, 0)`. Ties go to the lower class index.
/// Returns the loss and its gradient w.r.t. `scores`.
pub fn margin_ranking(
    scores: &[f64],
    ground_truth: usize,
    negatives: Range<usize>,
    top_k: usize,
    margin: f64,
) -> Result<(f64, Vec<f64>)> {
    if ground_truth >= scores.len() || negatives.end > scores.len() {
        return Err(Error::shape(
            "margin_ranking",
            format!("indices < {}", scores.len()),
            format!("gt {ground_truth}, negatives {negatives:?}"),
        ));
    }
    let mut candidates: Vec<usize> = negatives.filter(|&c| c != ground_truth).collect();
    // stable sort keeps lower indices first among equal scores
    candidates.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    candidates.truncate(top_k);
    let mut loss = 0.0;
    let mut grad = vec![0.0; scores.len()];
    for c in candidates {
        let h = margin - scores[ground_truth] + scores[c];
        if h > 0.0 {
            loss += h;
            grad[ground_truth] -= 1.0;
            grad[c] += 1.0;
        }
    }
    Ok((loss, grad))
}

/// Margin ranking for one sample given its raw logits. Old classes are
/// `0..n_old`, new classes `n_old..logits.len()`.
pub fn lucir_mr(
    logits: &[f64],
    ground_truth: usize,
    n_old: usize,
    top_k: usize,
    margin: f64,
) -> Result<VectorLoss> {
    let unit = l2_normalize(logits);
    if unit.degenerate {
        return Ok(VectorLoss {
            loss: 0.0,
            grad: vec![0.0; logits.len()],
            degenerate: true,
        });
    }
    let (loss, g) = margin_ranking(
        &unit.values,
        ground_truth,
        n_old..logits.len(),
        top_k,
        margin,
    )?;
    Ok(VectorLoss {
        loss,
        grad: through_normalization(&g, &unit.values, unit.norm),
        degenerate: false,
    })
}

/// `λ_base √(|C_N| / |C_o|)`, or `None` when there are no old classes.
pub fn lucir_lambda(lambda_base: f64, n_new: usize, n_old: usize) -> Option<f64> {
    (n_old > 0).then(|| lambda_base * (n_new as f64 / n_old as f64).sqrt())
}

/// Batch mean of [`lucir_dis`] between the teacher logits and the first
/// `teacher_logits.cols()` current logits. Also returns the degenerate count.
pub fn lucir_dis_batch(teacher_logits: &Matrix, logits: &Matrix) -> Result<(LossGrad, usize)> {
    let n = logits.rows();
    let l = teacher_logits.cols();
    if teacher_logits.rows() != n || l > logits.cols() {
        return Err(Error::shape(
            "lucir_dis_batch",
            format!("{n}x(<= {})", logits.cols()),
            format!("{:?}", teacher_logits.shape()),
        ));
    }
    let mut out = LossGrad::zeros(n, logits.cols());
    let mut degenerate = 0;
    if n == 0 || l == 0 {
        return Ok((out, 0));
    }
    let scale = 1.0 / n as f64;
    for i in 0..n {
        let s = lucir_dis(teacher_logits.row(i), &logits.row(i)[..l])?;
        degenerate += usize::from(s.degenerate);
        out.loss += s.loss * scale;
        for (g, v) in out.grad.row_mut(i)[..l].iter_mut().zip(&s.grad) {
            *g = v * scale;
        }
    }
    Ok((out, degenerate))
}

/// Mean [`lucir_mr`] over the rows flagged in `replayed` whose target is an
/// old class; rows outside that set contribute nothing.
pub fn lucir_mr_batch(
    logits: &Matrix,
    targets: &[usize],
    replayed: &[bool],
    n_old: usize,
    top_k: usize,
    margin: f64,
) -> Result<(LossGrad, usize)> {
    let n = logits.rows();
    if targets.len() != n || replayed.len() != n {
        return Err(Error::shape(
            "lucir_mr_batch",
            n,
            format!("{} targets, {} flags", targets.len(), replayed.len()),
        ));
    }
    let rows: Vec<usize> = (0..n)
        .filter(|&i| replayed[i] && targets[i] < n_old)
        .collect();
    let mut out = LossGrad::zeros(n, logits.cols());
    let mut degenerate = 0;
    if rows.is_empty() || n_old >= logits.cols() {
        return Ok((out, 0));
    }
    let scale = 1.0 / rows.len() as f64;
    for i in rows {
        let s = lucir_mr(logits.row(i), targets[i], n_old, top_k, margin)?;
        degenerate += usize::from(s.degenerate);
        out.loss += s.loss * scale;
        for (g, v) in out.grad.row_mut(i).iter_mut().zip(&s.grad) {
            *g = v * scale;
        }
    }
    Ok((out, degenerate))
}
