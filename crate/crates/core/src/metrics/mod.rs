//! Evaluation measures: micro/macro F1, base/old/new subset scores, the
//! forgetting measure and the micro/macro divergence ratio.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct ClassCounts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

fn check_lengths(preds: &[usize], labels: &[usize], op: &'static str) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Empty(op));
    }
    if preds.len() != labels.len() {
        return Err(Error::shape(op, preds.len(), labels.len()));
    }
    Ok(())
}

fn class_counts(preds: &[usize], labels: &[usize], n_classes: usize) -> Vec<ClassCounts> {
    let mut counts = vec![ClassCounts::default(); n_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p == y {
            counts[y].tp += 1;
        } else {
            counts[p].fp += 1;
            counts[y].fn_ += 1;
        }
    }
    counts
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// F1 from true/false positives and false negatives pooled over all classes.
pub fn micro_f1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels, "micro_f1")?;
    let n_classes = preds.iter().chain(labels).max().map_or(0, |m| m + 1);
    let (tp, fp, fn_) = class_counts(preds, labels, n_classes)
        .iter()
        .fold((0, 0, 0), |(a, b, c), k| (a + k.tp, b + k.fp, c + k.fn_));
    Ok(f1(tp, fp, fn_))
}

/// Unweighted mean of per-class F1 over `0..n_classes`. A class with no
/// support and no predictions scores 0.
pub fn macro_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    check_lengths(preds, labels, "macro_f1")?;
    if n_classes == 0 {
        return Err(Error::Empty("macro_f1 class scope"));
    }
    if let Some(&c) = preds.iter().chain(labels).find(|&&c| c >= n_classes) {
        return Err(Error::shape("macro_f1", format!("class < {n_classes}"), c));
    }
    let counts = class_counts(preds, labels, n_classes);
    Ok(counts.iter().map(|k| f1(k.tp, k.fp, k.fn_)).sum::<f64>() / n_classes as f64)
}

/// Scores restricted to samples whose true label lies in each subset.
/// `None` marks a subset without test samples.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SubsetScores {
    pub base: Option<f64>,
    pub old: Option<f64>,
    pub new: Option<f64>,
    pub overall: Option<f64>,
}

/// Micro-F1 over the samples whose label is in `classes`, predictions unrestricted.
pub fn restricted_micro_f1(
    preds: &[usize],
    labels: &[usize],
    classes: &[usize],
) -> Result<Option<f64>> {
    if preds.len() != labels.len() {
        return Err(Error::shape(
            "restricted_micro_f1",
            preds.len(),
            labels.len(),
        ));
    }
    let (p, y): (Vec<usize>, Vec<usize>) = preds
        .iter()
        .zip(labels)
        .filter(|(_, y)| classes.contains(y))
        .map(|(&p, &y)| (p, y))
        .unzip();
    if p.is_empty() {
        return Ok(None);
    }
    micro_f1(&p, &y).map(Some)
}

pub fn subset_scores(
    preds: &[usize],
    labels: &[usize],
    base_classes: &[usize],
    old_classes: &[usize],
    new_classes: &[usize],
) -> Result<SubsetScores> {
    Ok(SubsetScores {
        base: restricted_micro_f1(preds, labels, base_classes)?,
        old: restricted_micro_f1(preds, labels, old_classes)?,
        new: restricted_micro_f1(preds, labels, new_classes)?,
        overall: if preds.is_empty() {
            None
        } else {
            Some(micro_f1(preds, labels)?)
        },
    })
}

/// `a[k][j]`: score on task `j` after training task `k`, for `j <= k`.
/// Steps are 0-based in storage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the scores after the next task; must hold one entry per task so far.
    pub fn push_step(&mut self, scores: Vec<f64>) -> Result<()> {
        let expected = self.rows.len() + 1;
        if scores.len() != expected {
            return Err(Error::shape(
                "AccuracyMatrix::push_step",
                expected,
                scores.len(),
            ));
        }
        if let Some((index, value)) = scores
            .iter()
            .copied()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(v))
        {
            return Err(Error::NonFinite {
                what: "accuracy (must lie in [0, 1])",
                index,
                value,
            });
        }
        self.rows.push(scores);
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, step: usize, task: usize) -> Option<f64> {
        self.rows.get(step).and_then(|r| r.get(task)).copied()
    }

    /// Forgetting after learning `k` tasks (1-based, `k >= 2`): the mean over
    /// the first `k − 1` tasks of best-so-far minus current score.
    pub fn forgetting(&self, k: usize) -> Option<f64> {
        if k < 2 || k > self.rows.len() {
            return None;
        }
        let current = &self.rows[k - 1];
        let total: f64 = (0..k - 1)
            .map(|j| {
                let best = self.rows[j..k]
                    .iter()
                    .map(|r| r[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                best - current[j]
            })
            .sum();
        Some(total / (k - 1) as f64)
    }
}

/// `100 · micro / macro`, `None` when macro is zero.
pub fn divergence_ratio(micro: f64, macro_: f64) -> Option<f64> {
    (macro_ > 0.0).then(|| 100.0 * micro / macro_)
}

/// One evaluation row of an incremental run.
///
/// Serialized column order: `order,step,method,S,overall_micro,overall_macro,base,old,new,forgetting`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub order: usize,
    pub step: usize,
    pub method: String,
    #[serde(rename = "S")]
    pub holdout: usize,
    pub overall_micro: f64,
    pub overall_macro: f64,
    pub base: Option<f64>,
    pub old: Option<f64>,
    pub new: Option<f64>,
    pub forgetting: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1];
        assert_eq!(micro_f1(&y, &y).unwrap(), 1.0);
        assert_eq!(macro_f1(&y, &y, 3).unwrap(), 1.0);
    }

    #[test]
    fn micro_is_accuracy() {
        assert_eq!(micro_f1(&[0, 1, 2, 0], &[0, 1, 2, 2]).unwrap(), 0.75);
    }

    #[test]
    fn macro_counts_absent_classes_as_zero() {
        // class 2 is in scope but never appears
        let m = macro_f1(&[0, 1], &[0, 1], 3).unwrap();
        assert!((m - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(micro_f1(&[], &[]).is_err());
        assert!(macro_f1(&[], &[], 2).is_err());
        assert!(micro_f1(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn subsets_at_first_step_coincide() {
        let preds = [0, 1, 1, 0];
        let labels = [0, 1, 0, 0];
        let s = subset_scores(&preds, &labels, &[0, 1], &[], &[0, 1]).unwrap();
        assert_eq!(s.base, s.new);
        assert_eq!(s.base, s.overall);
        assert_eq!(s.old, None);
    }

    #[test]
    fn forgetting_cases() {
        let mut a = AccuracyMatrix::new();
        a.push_step(vec![0.9]).unwrap();
        assert_eq!(a.forgetting(1), None);
        a.push_step(vec![0.4, 0.8]).unwrap();
        assert!((a.forgetting(2).unwrap() - 0.5).abs() < 1e-15);

        let mut rising = AccuracyMatrix::new();
        rising.push_step(vec![0.5]).unwrap();
        rising.push_step(vec![0.6, 0.5]).unwrap();
        rising.push_step(vec![0.7, 0.6, 0.9]).unwrap();
        assert_eq!(rising.forgetting(3), Some(0.0));
        assert!(rising.push_step(vec![0.1]).is_err());
    }

    #[test]
    fn divergence_cases() {
        assert_eq!(divergence_ratio(0.4, 0.4), Some(100.0));
        assert_eq!(divergence_ratio(0.5, 0.25), Some(200.0));
        assert_eq!(divergence_ratio(0.5, 0.0), None);
    }

    fn pairs() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (1usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec(0usize..5, n),
                prop::collection::vec(0usize..5, n),
            )
        })
    }

    proptest! {
        #[test]
        fn micro_equals_accuracy((p, y) in pairs()) {
            let acc = p.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / p.len() as f64;
            prop_assert!((micro_f1(&p, &y).unwrap() - acc).abs() < 1e-12);
        }

        #[test]
        fn macro_is_relabeling_invariant((p, y) in pairs(), perm in Just([3usize, 0, 4, 1, 2]).prop_shuffle()) {
            let pp: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
            let yy: Vec<usize> = y.iter().map(|&c| perm[c]).collect();
            let a = macro_f1(&p, &y, 5).unwrap();
            let b = macro_f1(&pp, &yy, 5).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn forgetting_is_nonnegative(rows in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 6), 2..6)) {
            let mut a = AccuracyMatrix::new();
            for (k, r) in rows.iter().enumerate() {
                a.push_step(r[..=k].to_vec()).unwrap();
            }
            for k in 2..=rows.len() {
                prop_assert!(a.forgetting(k).unwrap() >= 0.0);
            }
        }
    }
}
