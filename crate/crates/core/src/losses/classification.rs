//! Softmax cross-entropy, temperature-scaled distillation and the ILOS
//! logit blend. All losses are batch means and return `∂loss/∂logits`.

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Lower clamp on probabilities inside `log`.
pub const PROB_EPSILON: f64 = 1e-12;

/// Batch-mean loss together with its gradient w.r.t. the logits it consumed.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Matrix,
}

impl LossGrad {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            loss: 0.0,
            grad: Matrix::zeros(rows, cols),
        }
    }

    /// `self += weight · other`.
    pub fn accumulate(&mut self, other: &LossGrad, weight: f64) -> Result<()> {
        self.loss += weight * other.loss;
        self.grad.add_scaled(&other.grad, weight)
    }
}

/// Numerically stable `log softmax(row / temperature)`.
pub fn log_softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = row.iter().map(|v| (v - max) / temperature).collect();
    let lse = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
    shifted.into_iter().map(|v| v - lse).collect()
}

pub fn softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    log_softmax(row, temperature)
        .into_iter()
        .map(f64::exp)
        .collect()
}

fn check_targets(logits: &Matrix, targets: &[usize], op: &'static str) -> Result<()> {
    if targets.len() != logits.rows() {
        return Err(Error::shape(
            op,
            format!("{} targets", logits.rows()),
            targets.len(),
        ));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::shape(op, format!("target < {}", logits.cols()), t));
    }
    Ok(())
}

/// `−mean Σ y log softmax(logits)` for one-hot targets given as class indices.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<LossGrad> {
    check_targets(logits, targets, "cross_entropy")?;
    let n = logits.rows();
    if n == 0 {
        return Err(Error::Empty("cross_entropy"));
    }
    let inv_n = 1.0 / n as f64;
    let mut out = LossGrad::zeros(n, logits.cols());
    for (i, &t) in targets.iter().enumerate() {
        let log_p = log_softmax(logits.row(i), 1.0);
        out.loss -= log_p[t].max(PROB_EPSILON.ln());
        for (g, lp) in out.grad.row_mut(i).iter_mut().zip(&log_p) {
            *g = lp.exp() * inv_n;
        }
        out.grad[(i, t)] -= inv_n;
    }
    out.loss *= inv_n;
    Ok(out)
}

/// Temperature-scaled teacher probabilities over the old classes.
pub fn recorded_probabilities(teacher_logits: &Matrix, temperature: f64) -> Matrix {
    let rows: Vec<Vec<f64>> = teacher_logits
        .iter_rows()
        .map(|r| softmax(r, temperature))
        .collect();
    Matrix::from_fn(teacher_logits.rows(), teacher_logits.cols(), |r, c| {
        rows[r][c]
    })
}

/// Distillation cross-entropy between recorded and current temperature-scaled
/// distributions over the first `recorded.cols()` classes. The gradient has
/// the shape of `current_logits` and is zero on the remaining columns.
pub fn distillation_loss(
    recorded: &Matrix,
    current_logits: &Matrix,
    temperature: f64,
) -> Result<LossGrad> {
    let n = current_logits.rows();
    let l = recorded.cols();
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if recorded.rows() != n || l > current_logits.cols() {
        return Err(Error::shape(
            "distillation_loss",
            format!("recorded {n}x(<= {})", current_logits.cols()),
            format!("{:?}", recorded.shape()),
        ));
    }
    let mut out = LossGrad::zeros(n, current_logits.cols());
    if l == 0 || n == 0 {
        return Ok(out);
    }
    let scale = 1.0 / n as f64;
    for i in 0..n {
        let log_q = log_softmax(&current_logits.row(i)[..l], temperature);
        let p = recorded.row(i);
        let mut sample = 0.0;
        for k in 0..l {
            sample -= p[k] * log_q[k].max(PROB_EPSILON.ln());
            out.grad[(i, k)] = (log_q[k].exp() - p[k]) * scale / temperature;
        }
        out.loss += sample * scale;
    }
    Ok(out)
}

/// Loss balance weight: old classes over all observed classes.
pub fn old_class_ratio(n_old: usize, n_seen: usize) -> f64 {
    if n_seen == 0 {
        0.0
    } else {
        n_old as f64 / n_seen as f64
    }
}

/// `kd_weight · KD(recorded, logits) + CE(logits, targets)`.
pub fn cross_distillation(
    logits: &Matrix,
    targets: &[usize],
    recorded: &Matrix,
    temperature: f64,
    kd_weight: f64,
) -> Result<LossGrad> {
    let mut out = cross_entropy(logits, targets)?;
    if kd_weight != 0.0 && recorded.cols() > 0 {
        let kd = distillation_loss(recorded, logits, temperature)?;
        out.accumulate(&kd, kd_weight)?;
    }
    Ok(out)
}

/// Blends the first `teacher_logits.cols()` logits towards the teacher:
/// `õ_k = β o_k + (1 − β) ô_k`; the remaining (new-class) logits pass through.
pub fn ilos_adjust_logits(logits: &Matrix, teacher_logits: &Matrix, beta: f64) -> Result<Matrix> {
    let n_old = teacher_logits.cols();
    if teacher_logits.rows() != logits.rows() || n_old > logits.cols() {
        return Err(Error::shape(
            "ilos_adjust_logits",
            format!("teacher {}x(<= {})", logits.rows(), logits.cols()),
            format!("{:?}", teacher_logits.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidConfig(format!(
            "beta must lie in [0, 1], got {beta}"
        )));
    }
    let mut out = logits.clone();
    for i in 0..logits.rows() {
        let t = teacher_logits.row(i);
        for (k, v) in out.row_mut(i)[..n_old].iter_mut().enumerate() {
            *v = beta * *v + (1.0 - beta) * t[k];
        }
    }
    Ok(out)
}

/// CE on the blended logits plus `kd_weight` · KD on the raw logits.
pub fn ilos_loss(
    logits: &Matrix,
    targets: &[usize],
    teacher_logits: &Matrix,
    beta: f64,
    temperature: f64,
    kd_weight: f64,
) -> Result<LossGrad> {
    let adjusted = ilos_adjust_logits(logits, teacher_logits, beta)?;
    let mut out = cross_entropy(&adjusted, targets)?;
    let n_old = teacher_logits.cols();
    for i in 0..out.grad.rows() {
        out.grad.row_mut(i)[..n_old]
            .iter_mut()
            .for_each(|g| *g *= beta);
    }
    if kd_weight != 0.0 && n_old > 0 {
        let recorded = recorded_probabilities(teacher_logits, temperature);
        let kd = distillation_loss(&recorded, logits, temperature)?;
        out.accumulate(&kd, kd_weight)?;
    }
    Ok(out)
}
