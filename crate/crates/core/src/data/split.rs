use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Per-class random split.
    Stratified,
    /// Whole subjects go to one side.
    BySubject,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub train_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: FeatureDataset,
    pub test: FeatureDataset,
    /// Classes with samples in the dataset but none on the train side.
    pub missing_from_train: Vec<usize>,
}

/// Train/test split; both sides keep the original sample order.
pub fn split(dataset: &FeatureDataset, spec: &SplitSpec) -> Result<Split> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train_idx = match spec.mode {
        SplitMode::Stratified => {
            let mut idx = Vec::new();
            for class in 0..dataset.n_classes() {
                let mut members = dataset.indices_of(class);
                members.shuffle(&mut rng);
                let n_train = (spec.train_fraction * members.len() as f64).round() as usize;
                idx.extend_from_slice(&members[..n_train]);
            }
            idx
        }
        SplitMode::BySubject => {
            let subjects = dataset
                .subjects()
                .ok_or_else(|| Error::InvalidConfig("by-subject split needs subject ids".into()))?;
            let mut unique: Vec<&String> = subjects
                .iter()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if unique.len() < 2 {
                return Err(Error::InvalidConfig(
                    "by-subject split needs at least two subjects".into(),
                ));
            }
            unique.shuffle(&mut rng);
            let n_train = ((spec.train_fraction * unique.len() as f64).round() as usize)
                .clamp(1, unique.len() - 1);
            let chosen: BTreeSet<&String> = unique[..n_train].iter().copied().collect();
            (0..dataset.len())
                .filter(|&i| chosen.contains(&subjects[i]))
                .collect()
        }
    };
    train_idx.sort_unstable();
    let in_train: BTreeSet<usize> = train_idx.iter().copied().collect();
    let test_idx: Vec<usize> = (0..dataset.len())
        .filter(|i| !in_train.contains(i))
        .collect();

    let train = dataset.subset(&train_idx);
    let present: BTreeSet<usize> = dataset.labels().iter().copied().collect();
    let trained: BTreeSet<usize> = train.labels().iter().copied().collect();
    let missing_from_train: Vec<usize> = present.difference(&trained).copied().collect();
    for &c in &missing_from_train {
        log::warn!(
            "class `{}` has no training samples after the split",
            dataset.class_names()[c]
        );
    }
    Ok(Split {
        train,
        test: dataset.subset(&test_idx),
        missing_from_train,
    })
}

/// Per-feature affine map to zero mean and unit variance, fit on one set.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(dataset: &FeatureDataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Empty("standardizer fit"));
        }
        let n = dataset.len() as f64;
        let d = dataset.dim();
        let mut mean = vec![0.0; d];
        for row in dataset.features().iter_rows() {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for row in dataset.features().iter_rows() {
            var.iter_mut()
                .zip(row)
                .zip(&mean)
                .for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
        }
        let scale = var
            .into_iter()
            .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, dataset: &mut FeatureDataset) -> Result<()> {
        if dataset.dim() != self.mean.len() {
            return Err(Error::shape(
                "Standardizer::apply",
                self.mean.len(),
                dataset.dim(),
            ));
        }
        let features = dataset.features_mut();
        for r in 0..features.rows() {
            for ((v, m), s) in features
                .row_mut(r)
                .iter_mut()
                .zip(&self.mean)
                .zip(&self.scale)
            {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }
}
