//! Rotation of each layer's weight space into the eigenbases of its input and
//! output-gradient covariances, so a diagonal Fisher fits better.
//!
//! For a layer `z = W x + b`, `U1` diagonalizes `E[x xᵀ]` and `U2`
//! diagonalizes `E[δ δᵀ]` with `δ = ∂(−log p)/∂z` under labels sampled from
//! the model. The layer then trains `W' = U2ᵀ W U1` while `U1`, `U2` stay
//! fixed, leaving the network function unchanged.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use crate::error::Result;
use crate::losses::classification::softmax;
use crate::losses::importance::sample_model_labels;
use crate::nn::{LayerRotation, Matrix, MlpNetwork, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct RotationContext {
    pub layers: Vec<LayerRotation>,
}

impl RotationContext {
    /// Largest `|UᵀU − I|` entry over all rotation matrices.
    pub fn max_orthogonality_error(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|r| [&r.input, &r.output])
            .map(orthogonality_error)
            .fold(0.0, f64::max)
    }
}

pub fn orthogonality_error(u: &Matrix) -> f64 {
    let gram = u.transposed_matmul(u).expect("square");
    gram.max_abs_diff(&Matrix::identity(u.rows()))
}

/// `(1/N) Σ_i row_i row_iᵀ`.
fn second_moment(rows: &Matrix) -> Matrix {
    let mut m = rows.transposed_matmul(rows).expect("same row count");
    m.scale(1.0 / rows.rows().max(1) as f64);
    m
}

/// Orthonormal eigenvectors of a symmetric matrix as columns, ordered by
/// descending eigenvalue with each column's largest entry made positive.
/// Falls back to the identity when the decomposition is not usable.
pub fn eigenbasis(cov: &Matrix) -> Matrix {
    let n = cov.rows();
    let identity = Matrix::identity(n);
    if cov.first_non_finite().is_some() {
        log::warn!("non-finite covariance; using identity rotation");
        return identity;
    }
    let sym = DMatrix::from_fn(n, n, |r, c| 0.5 * (cov[(r, c)] + cov[(c, r)]));
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = Matrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        let pivot = (0..n)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
            .unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            basis[(r, col)] = sign * v[r];
        }
    }
    if basis.first_non_finite().is_some() || orthogonality_error(&basis) > 1e-8 {
        log::warn!("covariance eigendecomposition failed; using identity rotation");
        return identity;
    }
    basis
}

/// Rotates every layer of `net` using statistics of `inputs`. Any existing
/// rotation is folded back first, so the result depends only on the function
/// `net` computes.
pub fn rwc_rotate<R: Rng + ?Sized>(
    net: &MlpNetwork,
    inputs: &Matrix,
    rng: &mut R,
) -> Result<(MlpNetwork, RotationContext)> {
    let mut plain = net.clone();
    plain.clear_rotations();
    let labels = sample_model_labels(&plain, inputs, rng)?;
    let cache = plain.forward(inputs)?;
    let mut logit_grad = Matrix::zeros(inputs.rows(), plain.output_dim());
    for (i, &y) in labels.iter().enumerate() {
        let p = softmax(cache.logits().row(i), 1.0);
        logit_grad.row_mut(i).copy_from_slice(&p);
        logit_grad[(i, y)] -= 1.0;
    }
    let (_, deltas) = plain.backward_with_deltas(&cache, &logit_grad)?;

    let mut rotations = Vec::with_capacity(plain.layers().len());
    for (layer, delta) in deltas.iter().enumerate() {
        rotations.push(LayerRotation {
            input: eigenbasis(&second_moment(cache.layer_input(layer))),
            output: eigenbasis(&second_moment(delta)),
        });
    }
    let mut rotated = plain;
    for (layer, rot) in rotated.layers_mut().iter_mut().zip(&rotations) {
        layer.set_rotation(rot.clone())?;
    }
    Ok((rotated, RotationContext { layers: rotations }))
}

/// Re-expresses a diagonal importance estimate from the coordinates of
/// `from` (per-layer rotation, `None` for plain weights) into those of `to`,
/// keeping the diagonal of the transformed quadratic form. With
/// `A = U2_toᵀ U2_from` and `B = U1_fromᵀ U1_to` the weight block becomes
/// `(A∘A) F (B∘B)`; biases are never rotated.
pub fn reexpress_importance(
    importance: &ParamSet,
    from: &[Option<LayerRotation>],
    to: &RotationContext,
) -> Result<ParamSet> {
    let mut out = importance.clone();
    for ((layer, src), dst) in out.layers_mut().iter_mut().zip(from).zip(&to.layers) {
        let a = match src {
            Some(s) => dst.output.transposed_matmul(&s.output)?,
            None => dst.output.transpose(),
        };
        let b = match src {
            Some(s) => s.input.transposed_matmul(&dst.input)?,
            None => dst.input.clone(),
        };
        let a2 = a.map(|v| v * v);
        let b2 = b.map(|v| v * v);
        layer.weights = a2.matmul(&layer.weights)?.matmul(&b2)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_covariance_gives_identity_basis() {
        assert_eq!(eigenbasis(&Matrix::identity(4)), Matrix::identity(4));
    }

    #[test]
    fn diagonal_covariance_sorts_axes() {
        let cov = Matrix::from_rows(&[[1.0, 0.0], [0.0, 3.0]]).unwrap();
        let u = eigenbasis(&cov);
        assert_eq!(u, Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap());
    }

    #[test]
    fn non_finite_covariance_falls_back_to_identity() {
        let cov = Matrix::from_rows(&[[f64::NAN, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(eigenbasis(&cov), Matrix::identity(2));
    }

    #[test]
    fn rotation_preserves_function_and_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = MlpNetwork::new(4, &[6, 5], 3, &mut rng).unwrap();
        let x = Matrix::from_fn(40, 4, |r, c| {
            ((r * 7 + c * 3) % 11) as f64 / 5.0 - 1.0 + 0.3 * c as f64
        });
        let (rotated, ctx) = rwc_rotate(&net, &x, &mut rng).unwrap();
        assert!(ctx.max_orthogonality_error() < 1e-8);
        let before = net.logits(&x).unwrap();
        let after = rotated.logits(&x).unwrap();
        assert!(before.max_abs_diff(&after) < 1e-10);
    }

    #[test]
    fn reexpress_from_plain_to_identity_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = MlpNetwork::new(3, &[2], 2, &mut rng).unwrap();
        let imp = net.params().clone();
        let ctx = RotationContext {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerRotation {
                    input: Matrix::identity(l.in_dim()),
                    output: Matrix::identity(l.out_dim()),
                })
                .collect(),
        };
        let from = vec![None; 2];
        assert_eq!(reexpress_importance(&imp, &from, &ctx).unwrap(), imp);
    }
}
