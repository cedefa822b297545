//! Gaussian class blobs as a desk-scale stand-in for extracted sensor features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::FeatureDataset;
use crate::error::{Error, Result};
use crate::nn::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImbalanceProfile {
    Balanced,
    /// Class `c` gets `round(base · ratio^c)` samples, at least one.
    Geometric {
        ratio: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim: usize,
    /// Distance of every class mean from the origin.
    pub separation: f64,
    pub samples_per_class: usize,
    #[serde(default = "balanced")]
    pub imbalance: ImbalanceProfile,
    /// Number of round-robin subject ids; 0 omits the subject column.
    #[serde(default)]
    pub subjects: usize,
    #[serde(default)]
    pub seed: u64,
}

fn balanced() -> ImbalanceProfile {
    ImbalanceProfile::Balanced
}

impl SyntheticSpec {
    pub fn class_counts(&self) -> Vec<usize> {
        (0..self.n_classes)
            .map(|c| match self.imbalance {
                ImbalanceProfile::Balanced => self.samples_per_class,
                ImbalanceProfile::Geometric { ratio } => {
                    ((self.samples_per_class as f64 * ratio.powi(c as i32)).round() as usize).max(1)
                }
            })
            .collect()
    }
}

/// Classes share unit isotropic covariance; means point in random directions.
pub fn synthetic_gaussians(spec: &SyntheticSpec) -> Result<FeatureDataset> {
    if !(spec.separation > 0.0 && spec.separation.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "separation must be > 0, got {}",
            spec.separation
        )));
    }
    if spec.n_classes == 0 || spec.dim == 0 || spec.samples_per_class == 0 {
        return Err(Error::InvalidConfig(
            "synthetic data needs classes, dimensions and samples".into(),
        ));
    }
    if let ImbalanceProfile::Geometric { ratio } = spec.imbalance {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "geometric ratio must lie in (0, 1], got {ratio}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm * spec.separation).collect()
        })
        .collect();

    let counts = spec.class_counts();
    let total: usize = counts.iter().sum();
    let mut values = Vec::with_capacity(total * spec.dim);
    let mut labels = Vec::with_capacity(total);
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            for &m in &means[class] {
                let noise: f64 = StandardNormal.sample(&mut rng);
                values.push(m + noise);
            }
            labels.push(class);
        }
    }
    let subjects = (spec.subjects > 0).then(|| {
        (0..total)
            .map(|i| format!("s{}", i % spec.subjects))
            .collect()
    });
    FeatureDataset::new(
        Matrix::from_vec(total, spec.dim, values)?,
        labels,
        subjects,
        (0..spec.n_classes).map(|c| c.to_string()).collect(),
    )
}
