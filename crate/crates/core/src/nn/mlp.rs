//! Fully-connected classifier with a single, growable output head.
//!
//! Each layer computes `z = W x + b` followed by its activation. A layer may
//! additionally carry a fixed orthogonal rotation pair `(U1, U2)`; it then
//! stores the rotated weights `W' = U2ᵀ W U1` as its trainable parameters and
//! computes `z = U2 W' U1ᵀ x + b`, which is the same function.

use rand::distr::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerParams, Matrix, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation; ReLU uses 0 at the kink.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fixed orthogonal maps around a layer's trainable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRotation {
    /// `U1`, shape `(in_dim, in_dim)`.
    pub input: Matrix,
    /// `U2`, shape `(out_dim, out_dim)`.
    pub output: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    params: LayerParams,
    activation: Activation,
    rotation: Option<LayerRotation>,
}

impl DenseLayer {
    pub fn new(params: LayerParams, activation: Activation) -> Result<Self> {
        if params.bias.len() != params.weights.rows() {
            return Err(Error::shape(
                "DenseLayer::new",
                format!("bias of length {}", params.weights.rows()),
                params.bias.len(),
            ));
        }
        Ok(Self {
            params,
            activation,
            rotation: None,
        })
    }

    fn random<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layer = Self {
            params: LayerParams {
                weights: Matrix::zeros(0, in_dim),
                bias: Vec::with_capacity(out_dim),
            },
            activation,
            rotation: None,
        };
        layer.append_random_rows(out_dim, rng);
        layer
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) rows, drawn weights first then bias.
    fn append_random_rows<R: Rng + ?Sized>(&mut self, count: usize, rng: &mut R) {
        let fan_in = self.in_dim().max(1) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for _ in 0..count {
            let row: Vec<f64> = (0..self.in_dim()).map(|_| dist.sample(rng)).collect();
            self.params.weights.append_rows(1, |_, c| row[c]);
            self.params.bias.push(dist.sample(rng));
        }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.params.weights.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.params.weights.rows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Trainable parameters (rotated coordinates when a rotation is attached).
    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LayerParams {
        &mut self.params
    }

    pub fn rotation(&self) -> Option<&LayerRotation> {
        self.rotation.as_ref()
    }

    /// `W` in the original coordinates: `U2 W' U1ᵀ`, or the stored weights.
    pub fn effective_weights(&self) -> Matrix {
        match &self.rotation {
            None => self.params.weights.clone(),
            Some(rot) => rot
                .output
                .matmul(&self.params.weights)
                .and_then(|m| m.matmul_transposed(&rot.input))
                .expect("rotation shapes are maintained with the weights"),
        }
    }

    /// Replaces the layer's weights by `U2ᵀ W U1` and attaches the rotation.
    pub(crate) fn set_rotation(&mut self, rotation: LayerRotation) -> Result<()> {
        let w = self.effective_weights();
        if rotation.input.shape() != (self.in_dim(), self.in_dim())
            || rotation.output.shape() != (self.out_dim(), self.out_dim())
        {
            return Err(Error::shape(
                "DenseLayer::set_rotation",
                format!("U1 {0}x{0}, U2 {1}x{1}", self.in_dim(), self.out_dim()),
                format!(
                    "U1 {:?}, U2 {:?}",
                    rotation.input.shape(),
                    rotation.output.shape()
                ),
            ));
        }
        self.params.weights = rotation
            .output
            .transposed_matmul(&w)?
            .matmul(&rotation.input)?;
        self.rotation = Some(rotation);
        Ok(())
    }

    /// Folds any rotation back into plain weights.
    pub(crate) fn clear_rotation(&mut self) {
        if self.rotation.is_some() {
            self.params.weights = self.effective_weights();
            self.rotation = None;
        }
    }
}

/// Intermediates of one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Layer inputs in original coordinates; `inputs[0]` is the batch.
    inputs: Vec<Matrix>,
    /// `x U1` for rotated layers.
    rotated_inputs: Vec<Option<Matrix>>,
    pre_activations: Vec<Matrix>,
    outputs: Matrix,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }

    /// Output-head values, one column per current class.
    pub fn logits(&self) -> &Matrix {
        &self.outputs
    }

    /// Penultimate-layer activations (the head's input).
    pub fn features(&self) -> &Matrix {
        self.inputs.last().expect("at least one layer")
    }

    pub fn layer_input(&self, layer: usize) -> &Matrix {
        &self.inputs[layer]
    }

    pub fn pre_activation(&self, layer: usize) -> &Matrix {
        &self.pre_activations[layer]
    }

    pub fn layer_count(&self) -> usize {
        self.pre_activations.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    layers: Vec<DenseLayer>,
}

impl MlpNetwork {
    /// ReLU hidden layers of the given widths followed by a linear head.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer sizes must be positive (input {input_dim}, hidden {hidden:?}, output {output_dim})"
            )));
        }
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for &width in hidden {
            layers.push(DenseLayer::random(fan_in, width, Activation::Relu, rng));
            fan_in = width;
        }
        layers.push(DenseLayer::random(
            fan_in,
            output_dim,
            Activation::Identity,
            rng,
        ));
        Ok(Self { layers })
    }

    /// Assembles a network from explicit layers; the last one is the head.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        let Some(head) = layers.last() else {
            return Err(Error::InvalidConfig(
                "network needs at least one layer".into(),
            ));
        };
        if head.activation != Activation::Identity {
            return Err(Error::InvalidConfig("output head must be linear".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "MlpNetwork::from_layers",
                    format!("layer {} input size {}", i + 1, pair[0].out_dim()),
                    pair[1].in_dim(),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.head().out_dim()
    }

    pub fn head(&self) -> &DenseLayer {
        self.layers.last().expect("non-empty")
    }

    pub fn is_rotated(&self) -> bool {
        self.layers.iter().any(|l| l.rotation.is_some())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.params.len()).sum()
    }

    /// Copy of the trainable parameters.
    pub fn params(&self) -> ParamSet {
        ParamSet::new(self.layers.iter().map(|l| l.params.clone()).collect())
    }

    pub fn set_params(&mut self, params: &ParamSet) -> Result<()> {
        self.params()
            .check_shape(params, "MlpNetwork::set_params")?;
        for (layer, p) in self.layers.iter_mut().zip(params.layers()) {
            layer.params = p.clone();
        }
        Ok(())
    }

    /// Reads one scalar in [`ParamSet`] flat order.
    pub fn param(&self, index: usize) -> f64 {
        let (layer, offset) = self.locate(index);
        let p = &self.layers[layer].params;
        let nw = p.weights.as_slice().len();
        if offset < nw {
            p.weights.as_slice()[offset]
        } else {
            p.bias[offset - nw]
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (layer, offset) = self.locate(index);
        let p = &mut self.layers[layer].params;
        let nw = p.weights.as_slice().len();
        if offset < nw {
            p.weights.as_mut_slice()[offset] = value;
        } else {
            p.bias[offset - nw] = value;
        }
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (i, l) in self.layers.iter().enumerate() {
            if index < l.params.len() {
                return (i, index);
            }
            index -= l.params.len();
        }
        panic!("parameter index out of range");
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ForwardCache> {
        if batch.cols() != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!("{} input columns", self.input_dim()),
                batch.cols(),
            ));
        }
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut rotated_inputs = Vec::with_capacity(n_layers);
        let mut pre_activations = Vec::with_capacity(n_layers);
        let mut current = batch.clone();
        for layer in &self.layers {
            let (z, rotated) = match &layer.rotation {
                None => (current.matmul_transposed(&layer.params.weights)?, None),
                Some(rot) => {
                    let xr = current.matmul(&rot.input)?;
                    let zr = xr.matmul_transposed(&layer.params.weights)?;
                    (zr.matmul_transposed(&rot.output)?, Some(xr))
                }
            };
            let mut z = z;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.params.bias) {
                    *v += b;
                }
            }
            let a = z.map(|v| layer.activation.apply(v));
            inputs.push(std::mem::replace(&mut current, a));
            rotated_inputs.push(rotated);
            pre_activations.push(z);
        }
        Ok(ForwardCache {
            inputs,
            rotated_inputs,
            pre_activations,
            outputs: current,
        })
    }

    /// Forward pass returning only the logits.
    pub fn logits(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward(batch)?.outputs)
    }

    /// Argmax over the head for each row; ties resolve to the lower index.
    pub fn predict(&self, batch: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        Ok(logits.iter_rows().map(argmax).collect())
    }

    pub fn backward(&self, cache: &ForwardCache, logit_grad: &Matrix) -> Result<ParamSet> {
        Ok(self.backward_with_deltas(cache, logit_grad)?.0)
    }

    /// Parameter gradients plus `∂loss/∂z` for every layer, in original
    /// (unrotated) output coordinates.
    pub fn backward_with_deltas(
        &self,
        cache: &ForwardCache,
        logit_grad: &Matrix,
    ) -> Result<(ParamSet, Vec<Matrix>)> {
        if cache.layer_count() != self.layers.len() {
            return Err(Error::shape(
                "backward",
                format!("{} cached layers", self.layers.len()),
                cache.layer_count(),
            ));
        }
        if logit_grad.shape() != cache.outputs.shape() {
            return Err(Error::shape(
                "backward",
                format!("logit gradient {:?}", cache.outputs.shape()),
                format!("{:?}", logit_grad.shape()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut deltas = Vec::with_capacity(self.layers.len());
        let mut upstream = logit_grad.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre_activations[i];
            if z.shape() != upstream.shape() {
                return Err(Error::shape(
                    "backward",
                    format!("{:?}", z.shape()),
                    format!("{:?}", upstream.shape()),
                ));
            }
            let mut delta = upstream;
            for (d, &zv) in delta.as_mut_slice().iter_mut().zip(z.as_slice()) {
                *d *= layer.activation.derivative(zv);
            }
            let mut bias_grad = vec![0.0; layer.out_dim()];
            for row in delta.iter_rows() {
                for (g, d) in bias_grad.iter_mut().zip(row) {
                    *g += d;
                }
            }
            let (weight_grad, input_grad) = match (&layer.rotation, &cache.rotated_inputs[i]) {
                (None, _) => (
                    delta.transposed_matmul(&cache.inputs[i])?,
                    if i > 0 {
                        Some(delta.matmul(&layer.params.weights)?)
                    } else {
                        None
                    },
                ),
                (Some(rot), Some(xr)) => {
                    let dr = delta.matmul(&rot.output)?;
                    let wg = dr.transposed_matmul(xr)?;
                    let ig = if i > 0 {
                        Some(
                            dr.matmul(&layer.params.weights)?
                                .matmul_transposed(&rot.input)?,
                        )
                    } else {
                        None
                    };
                    (wg, ig)
                }
                (Some(_), None) => {
                    return Err(Error::shape(
                        "backward",
                        "cache from a rotated network",
                        "cache without rotated inputs",
                    ));
                }
            };
            grads.push(LayerParams {
                weights: weight_grad,
                bias: bias_grad,
            });
            deltas.push(delta);
            upstream = input_grad.unwrap_or_else(|| Matrix::zeros(0, 0));
        }
        grads.reverse();
        deltas.reverse();
        Ok((ParamSet::new(grads), deltas))
    }

    /// Adds `count` output classes. Existing head rows are untouched.
    pub fn expand_head<R: Rng + ?Sized>(&mut self, count: usize, rng: &mut R) {
        if count == 0 {
            return;
        }
        let head = self.layers.last_mut().expect("non-empty");
        head.append_random_rows(count, rng);
        if let Some(rot) = head.rotation.as_mut() {
            let old = rot.output.rows();
            let n = old + count;
            rot.output = Matrix::from_fn(n, n, |r, c| {
                if r < old && c < old {
                    rot.output[(r, c)]
                } else if r == c {
                    1.0
                } else {
                    0.0
                }
            });
        }
    }

    /// Removes every layer rotation without changing the network function.
    pub fn clear_rotations(&mut self) {
        self.layers.iter_mut().for_each(DenseLayer::clear_rotation);
    }

    pub fn snapshot(&self) -> TeacherSnapshot {
        TeacherSnapshot { net: self.clone() }
    }
}

/// Frozen copy of a network taken before an incremental task.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    net: MlpNetwork,
}

impl TeacherSnapshot {
    pub fn network(&self) -> &MlpNetwork {
        &self.net
    }

    /// Number of classes the teacher knows about.
    pub fn class_count(&self) -> usize {
        self.net.output_dim()
    }

    pub fn logits(&self, batch: &Matrix) -> Result<Matrix> {
        self.net.logits(batch)
    }

    pub fn params(&self) -> ParamSet {
        self.net.params()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Result of [`l2_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    pub norm: f64,
    /// Set when the input had zero norm; `values` is then all zeros.
    pub degenerate: bool,
}

pub fn l2_normalize(v: &[f64]) -> Normalized {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Normalized {
            values: vec![0.0; v.len()],
            norm,
            degenerate: true,
        };
    }
    Normalized {
        values: v.iter().map(|x| x / norm).collect(),
        norm,
        degenerate: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn identity_net(n: usize) -> MlpNetwork {
        let layer = DenseLayer::new(
            LayerParams {
                weights: Matrix::identity(n),
                bias: vec![0.0; n],
            },
            Activation::Identity,
        )
        .unwrap();
        MlpNetwork::from_layers(vec![layer]).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = identity_net(2);
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(net.logits(&x).unwrap().row(0), &[1.0, 2.0]);
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero_logits() {
        let mut net = MlpNetwork::new(4, &[5, 3], 3, &mut rng()).unwrap();
        for layer in net.layers_mut() {
            layer.params_mut().bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let logits = net.logits(&Matrix::zeros(2, 4)).unwrap();
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = MlpNetwork::new(3, &[4], 2, &mut rng()).unwrap();
        assert!(matches!(
            net.forward(&Matrix::zeros(1, 2)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_logit_grad_gives_zero_gradients() {
        let net = MlpNetwork::new(3, &[4, 4], 2, &mut rng()).unwrap();
        let x = Matrix::from_fn(5, 3, |r, c| (r as f64 - c as f64) * 0.3);
        let cache = net.forward(&x).unwrap();
        let g = net.backward(&cache, &Matrix::zeros(5, 2)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_gradient_is_delta_transpose_x() {
        // loss = ½‖Wx − t‖² on a 2x2 identity-activated layer, two samples
        let layer = DenseLayer::new(
            LayerParams {
                weights: Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap(),
                bias: vec![0.0, 0.0],
            },
            Activation::Identity,
        )
        .unwrap();
        let net = MlpNetwork::from_layers(vec![layer]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let t = Matrix::from_rows(&[[0.0, 0.0], [0.0, 0.0]]).unwrap();
        let cache = net.forward(&x).unwrap();
        let mut delta = cache.logits().clone();
        delta.add_scaled(&t, -1.0).unwrap();
        // outputs: sample 1 → [1, 3], sample 2 → [2, 4]; δᵀx = [[1, 2], [3, 4]]
        let g = net.backward(&cache, &delta).unwrap();
        assert_eq!(g.layers()[0].weights.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.layers()[0].bias, vec![3.0, 7.0]);
    }

    #[test]
    fn expand_head_keeps_old_logits() {
        let mut r = rng();
        let mut net = MlpNetwork::new(3, &[6], 4, &mut r).unwrap();
        let probe = Matrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64 * 0.1 - 0.4);
        let before = net.logits(&probe).unwrap();
        net.expand_head(2, &mut r);
        assert_eq!(net.output_dim(), 6);
        let after = net.logits(&probe).unwrap();
        for i in 0..probe.rows() {
            assert_eq!(&after.row(i)[..4], before.row(i));
        }
    }

    #[test]
    fn expand_by_zero_is_identity_and_counts_add_up() {
        let mut r = rng();
        let mut net = MlpNetwork::new(3, &[4], 2, &mut r).unwrap();
        let copy = net.clone();
        net.expand_head(0, &mut r);
        assert_eq!(net, copy);
        for _ in 0..3 {
            net.expand_head(2, &mut r);
        }
        assert_eq!(net.output_dim(), 8);
    }

    #[test]
    fn snapshot_is_isolated_from_later_updates() {
        let mut net = MlpNetwork::new(2, &[3], 2, &mut rng()).unwrap();
        let probe = Matrix::from_rows(&[[0.5, -1.0]]).unwrap();
        let teacher = net.snapshot();
        let before = teacher.logits(&probe).unwrap();
        for i in 0..net.param_count() {
            let v = net.param(i);
            net.set_param(i, v + 1.0);
        }
        assert_eq!(teacher.logits(&probe).unwrap(), before);
        assert_ne!(net.logits(&probe).unwrap(), before);
    }

    #[test]
    fn l2_normalize_cases() {
        let n = l2_normalize(&[3.0, 4.0]);
        assert!((n.values[0] - 0.6).abs() < 1e-15 && (n.values[1] - 0.8).abs() < 1e-15);
        let unit = [0.0, 1.0, 0.0];
        assert_eq!(l2_normalize(&unit).values, unit.to_vec());
        let z = l2_normalize(&[0.0, 0.0]);
        assert!(z.degenerate);
        assert_eq!(z.values, vec![0.0, 0.0]);
    }

    #[test]
    fn flat_param_access_matches_param_set_order() {
        let net = MlpNetwork::new(2, &[3], 2, &mut rng()).unwrap();
        let flat = net.params().to_flat();
        assert_eq!(flat.len(), net.param_count());
        for (i, v) in flat.iter().enumerate() {
            assert_eq!(net.param(i), *v);
        }
    }
}
