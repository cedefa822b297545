//! Per-parameter importance weights and the quadratic anchor penalty.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::classification::softmax;
use crate::nn::{Matrix, MlpNetwork, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImportanceKind {
    /// Diagonal empirical Fisher information.
    Fisher,
    /// Mean absolute output sensitivity.
    Mas,
}

/// Nonnegative weights with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterImportance {
    weights: ParamSet,
    kind: ImportanceKind,
}

impl ParameterImportance {
    pub fn new(weights: ParamSet, kind: ImportanceKind) -> Result<Self> {
        if let Some((index, value)) = weights
            .iter()
            .copied()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::NonFinite {
                what: "importance weight (must be finite and >= 0)",
                index,
                value,
            });
        }
        Ok(Self { weights, kind })
    }

    pub fn weights(&self) -> &ParamSet {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ParamSet {
        &mut self.weights
    }

    pub fn kind(&self) -> ImportanceKind {
        self.kind
    }

    /// Element-wise sum with another estimate of the same kind and shape.
    pub fn accumulate(&mut self, other: &ParameterImportance) -> Result<()> {
        if self.kind != other.kind {
            return Err(Error::InvalidConfig(
                "cannot mix Fisher and MAS importance".into(),
            ));
        }
        self.weights.add_scaled(&other.weights, 1.0)
    }

    /// New head rows carry no importance.
    pub fn expand_head(&mut self, count: usize) {
        self.weights.expand_head(count, 0.0);
    }
}

/// `(λ/2) Σ w_i (θ_i − θ*_i)²` and its gradient `λ w ⊙ (θ − θ*)`.
fn quadratic_penalty(
    params: &ParamSet,
    anchor: &ParamSet,
    importance: &ParamSet,
    lambda: f64,
) -> Result<(f64, ParamSet)> {
    params.check_shape(anchor, "penalty anchor")?;
    params.check_shape(importance, "penalty importance")?;
    let mut grad = ParamSet::zeros_like(params);
    let mut penalty = 0.0;
    for (((g, &p), &a), &w) in grad
        .iter_mut()
        .zip(params.iter())
        .zip(anchor.iter())
        .zip(importance.iter())
    {
        let d = p - a;
        penalty += w * d * d;
        *g = lambda * w * d;
    }
    Ok((0.5 * lambda * penalty, grad))
}

/// Fisher-weighted anchor penalty.
pub fn ewc_penalty(
    params: &ParamSet,
    anchor: &ParamSet,
    fisher: &ParameterImportance,
    lambda: f64,
) -> Result<(f64, ParamSet)> {
    quadratic_penalty(params, anchor, &fisher.weights, lambda)
}

/// Ω-weighted anchor penalty; same form as [`ewc_penalty`].
pub fn mas_penalty(
    params: &ParamSet,
    anchor: &ParamSet,
    omega: &ParameterImportance,
    lambda: f64,
) -> Result<(f64, ParamSet)> {
    quadratic_penalty(params, anchor, &omega.weights, lambda)
}

/// Draws one label per row from the model's own softmax.
pub fn sample_model_labels<R: Rng + ?Sized>(
    net: &MlpNetwork,
    inputs: &Matrix,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let logits = net.logits(inputs)?;
    Ok(logits
        .iter_rows()
        .map(|row| {
            let p = softmax(row, 1.0);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (k, pk) in p.iter().enumerate() {
                acc += pk;
                if u < acc {
                    return k;
                }
            }
            p.len() - 1
        })
        .collect())
}

/// Per-sample gradient of `−log p(label | x)`, one row at a time.
pub(crate) fn per_sample_nll_grads<'a>(
    net: &'a MlpNetwork,
    inputs: &'a Matrix,
    labels: &'a [usize],
) -> impl Iterator<Item = Result<(ParamSet, Vec<Matrix>)>> + 'a {
    (0..inputs.rows()).map(move |i| {
        let x = inputs.select_rows(&[i]);
        let cache = net.forward(&x)?;
        let mut g = Matrix::from_vec(1, net.output_dim(), softmax(cache.logits().row(0), 1.0))?;
        g[(0, labels[i])] -= 1.0;
        net.backward_with_deltas(&cache, &g)
    })
}

/// Mean squared per-sample log-likelihood gradient for the given labels.
pub fn empirical_fisher(
    net: &MlpNetwork,
    inputs: &Matrix,
    labels: &[usize],
) -> Result<ParameterImportance> {
    if inputs.rows() == 0 {
        return Err(Error::Empty("fisher estimation"));
    }
    if labels.len() != inputs.rows() {
        return Err(Error::shape(
            "empirical_fisher",
            inputs.rows(),
            labels.len(),
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= net.output_dim()) {
        return Err(Error::shape(
            "empirical_fisher",
            format!("label < {}", net.output_dim()),
            l,
        ));
    }
    let mut fisher = ParamSet::zeros_like(&net.params());
    for step in per_sample_nll_grads(net, inputs, labels) {
        let (g, _) = step?;
        for (f, v) in fisher.iter_mut().zip(g.iter()) {
            *f += v * v;
        }
    }
    fisher.scale(1.0 / inputs.rows() as f64);
    ParameterImportance::new(fisher, ImportanceKind::Fisher)
}

/// Diagonal Fisher with labels sampled from the model (one draw per row).
pub fn estimate_fisher<R: Rng + ?Sized>(
    net: &MlpNetwork,
    inputs: &Matrix,
    rng: &mut R,
) -> Result<ParameterImportance> {
    if inputs.rows() == 0 {
        return Err(Error::Empty("fisher estimation"));
    }
    let labels = sample_model_labels(net, inputs, rng)?;
    empirical_fisher(net, inputs, &labels)
}

/// Scalar functional of the logit vector whose parameter sensitivity MAS measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MasFunctional {
    /// `‖o‖²`.
    #[default]
    SquaredL2,
    /// `‖o‖`, which for a single output reduces to `|o|`.
    L2,
}

impl MasFunctional {
    fn gradient(self, logits: &[f64]) -> Vec<f64> {
        match self {
            MasFunctional::SquaredL2 => logits.iter().map(|v| 2.0 * v).collect(),
            MasFunctional::L2 => {
                let norm = logits.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    vec![0.0; logits.len()]
                } else {
                    logits.iter().map(|v| v / norm).collect()
                }
            }
        }
    }

    pub fn value(self, logits: &[f64]) -> f64 {
        let sq: f64 = logits.iter().map(|v| v * v).sum();
        match self {
            MasFunctional::SquaredL2 => sq,
            MasFunctional::L2 => sq.sqrt(),
        }
    }
}

/// `Ω = (1/N) Σ_k |∂F(x_k; θ)/∂θ|`. Labels are not needed.
pub fn mas_importance(
    net: &MlpNetwork,
    inputs: &Matrix,
    functional: MasFunctional,
) -> Result<ParameterImportance> {
    if inputs.rows() == 0 {
        return Err(Error::Empty("MAS importance"));
    }
    let mut omega = ParamSet::zeros_like(&net.params());
    for i in 0..inputs.rows() {
        let cache = net.forward(&inputs.select_rows(&[i]))?;
        let g = Matrix::from_vec(
            1,
            net.output_dim(),
            functional.gradient(cache.logits().row(0)),
        )?;
        let grads = net.backward(&cache, &g)?;
        for (o, v) in omega.iter_mut().zip(grads.iter()) {
            *o += v.abs();
        }
    }
    omega.scale(1.0 / inputs.rows() as f64);
    ParameterImportance::new(omega, ImportanceKind::Mas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseLayer, LayerParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_set(v: f64) -> ParamSet {
        ParamSet::new(vec![LayerParams {
            weights: Matrix::from_vec(1, 1, vec![v]).unwrap(),
            bias: vec![],
        }])
    }

    fn single_layer(rows: &[&[f64]], bias: Vec<f64>) -> MlpNetwork {
        let layer = DenseLayer::new(
            LayerParams {
                weights: Matrix::from_rows(rows).unwrap(),
                bias,
            },
            Activation::Identity,
        )
        .unwrap();
        MlpNetwork::from_layers(vec![layer]).unwrap()
    }

    #[test]
    fn penalty_arithmetic() {
        let f = ParameterImportance::new(scalar_set(1.0), ImportanceKind::Fisher).unwrap();
        let (p, g) = ewc_penalty(&scalar_set(3.0), &scalar_set(0.0), &f, 2.0).unwrap();
        assert_eq!(p, 9.0);
        assert_eq!(g.to_flat(), vec![6.0]);

        let omega = ParameterImportance::new(scalar_set(2.0), ImportanceKind::Mas).unwrap();
        let (p, _) = mas_penalty(&scalar_set(2.0), &scalar_set(0.0), &omega, 0.25).unwrap();
        assert!((p - 1.0).abs() < 1e-15);
    }

    #[test]
    fn penalty_vanishes_at_anchor_or_zero_importance() {
        let f = ParameterImportance::new(scalar_set(5.0), ImportanceKind::Fisher).unwrap();
        assert_eq!(
            ewc_penalty(&scalar_set(1.5), &scalar_set(1.5), &f, 3.0)
                .unwrap()
                .0,
            0.0
        );
        let zero = ParameterImportance::new(scalar_set(0.0), ImportanceKind::Mas).unwrap();
        assert_eq!(
            mas_penalty(&scalar_set(9.0), &scalar_set(-9.0), &zero, 3.0)
                .unwrap()
                .0,
            0.0
        );
    }

    #[test]
    fn negative_importance_is_rejected() {
        assert!(ParameterImportance::new(scalar_set(-1.0), ImportanceKind::Fisher).is_err());
    }

    #[test]
    fn logistic_fisher_matches_closed_form() {
        // logits (w x, 0) make p(class 0) = σ(w x)
        let (w, x) = (0.7, -1.3);
        let net = single_layer(&[&[w], &[0.0]], vec![0.0, 0.0]);
        let sigma = 1.0 / (1.0 + (-w * x).exp());
        for (label, y) in [(0usize, 1.0), (1, 0.0)] {
            let f = empirical_fisher(&net, &Matrix::from_vec(1, 1, vec![x]).unwrap(), &[label])
                .unwrap();
            let expected = (sigma - y).powi(2) * x * x;
            assert!((f.weights().to_flat()[0] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn detached_parameter_has_zero_fisher() {
        // hidden unit 1 has zero outgoing weight, so its incoming weights never matter
        let hidden = DenseLayer::new(
            LayerParams {
                weights: Matrix::from_rows(&[[0.5, -0.2], [0.3, 0.8]]).unwrap(),
                bias: vec![0.1, 0.1],
            },
            Activation::Relu,
        )
        .unwrap();
        let head = DenseLayer::new(
            LayerParams {
                weights: Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap(),
                bias: vec![0.0, 0.0],
            },
            Activation::Identity,
        )
        .unwrap();
        let net = MlpNetwork::from_layers(vec![hidden, head]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0], [-0.5, 0.3]]).unwrap();
        let f = estimate_fisher(&net, &x, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let hidden_w = &f.weights().layers()[0].weights;
        assert_eq!(hidden_w.row(1), &[0.0, 0.0]);
        assert_eq!(f.weights().layers()[0].bias[1], 0.0);
        assert!(f.weights().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn mas_scalar_closed_forms() {
        let (w, x) = (1.7, -0.6);
        let net = single_layer(&[&[w]], vec![0.0]);
        let input = Matrix::from_vec(1, 1, vec![x]).unwrap();
        let l2 = mas_importance(&net, &input, MasFunctional::L2).unwrap();
        assert!((l2.weights().to_flat()[0] - x.abs()).abs() < 1e-15);
        let sq = mas_importance(&net, &input, MasFunctional::SquaredL2).unwrap();
        assert!((sq.weights().to_flat()[0] - 2.0 * (w * x).abs() * x.abs()).abs() < 1e-14);
    }

    #[test]
    fn zero_input_gives_zero_first_layer_omega() {
        let hidden = DenseLayer::new(
            LayerParams {
                weights: Matrix::from_rows(&[[0.5, -0.2], [0.3, 0.8]]).unwrap(),
                bias: vec![0.0, 0.0],
            },
            Activation::Relu,
        )
        .unwrap();
        let head = DenseLayer::new(
            LayerParams {
                weights: Matrix::from_rows(&[[1.0, 2.0]]).unwrap(),
                bias: vec![0.0],
            },
            Activation::Identity,
        )
        .unwrap();
        let net = MlpNetwork::from_layers(vec![hidden, head]).unwrap();
        let omega = mas_importance(&net, &Matrix::zeros(3, 2), MasFunctional::SquaredL2).unwrap();
        assert!(omega.weights().layers()[0]
            .weights
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn empty_data_is_an_error() {
        let net = single_layer(&[&[1.0]], vec![0.0]);
        assert!(matches!(
            empirical_fisher(&net, &Matrix::zeros(0, 1), &[]),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            mas_importance(&net, &Matrix::zeros(0, 1), MasFunctional::L2),
            Err(Error::Empty(_))
        ));
    }
}
