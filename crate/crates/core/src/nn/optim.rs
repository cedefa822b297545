//! Plain SGD with decoupled-from-loss weight decay and a step scheduler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{MlpNetwork, ParamSet};

/// Multiplies the learning rate by `factor` at every epoch `e` with
/// `e > effective_after` and `(e - effective_after) % step == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScheduler {
    pub effective_after: usize,
    pub step: usize,
    pub factor: f64,
}

impl StepScheduler {
    pub fn fires_at(&self, epoch: usize) -> bool {
        self.step > 0
            && epoch > self.effective_after
            && (epoch - self.effective_after).is_multiple_of(self.step)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    learning_rate: f64,
    weight_decay: f64,
    scheduler: StepScheduler,
    epoch: usize,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, weight_decay: f64, scheduler: StepScheduler) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be > 0, got {learning_rate}"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight decay must be >= 0, got {weight_decay}"
            )));
        }
        if !(scheduler.factor > 0.0 && scheduler.factor < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "scheduler factor must lie in (0, 1), got {}",
                scheduler.factor
            )));
        }
        Ok(Self {
            learning_rate,
            weight_decay,
            scheduler,
            epoch: 0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    /// Completed epochs so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Call once at the end of every epoch.
    pub fn scheduler_step(&mut self) {
        self.epoch += 1;
        if self.scheduler.fires_at(self.epoch) {
            self.learning_rate *= self.scheduler.factor;
        }
    }

    /// `θ ← θ − lr·(g + weight_decay·θ)`.
    pub fn sgd_step(&self, net: &mut MlpNetwork, grads: &ParamSet) -> Result<()> {
        net.params().check_shape(grads, "sgd_step")?;
        if let Some((index, value)) = grads.first_non_finite() {
            return Err(Error::NonFinite {
                what: "gradient",
                index,
                value,
            });
        }
        let lr = self.learning_rate;
        let wd = self.weight_decay;
        for (layer, g) in net.layers_mut().iter_mut().zip(grads.layers()) {
            let p = layer.params_mut();
            for (w, &gw) in p
                .weights
                .as_mut_slice()
                .iter_mut()
                .zip(g.weights.as_slice())
            {
                *w -= lr * (gw + wd * *w);
            }
            for (b, &gb) in p.bias.iter_mut().zip(&g.bias) {
                *b -= lr * (gb + wd * *b);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseLayer, LayerParams, Matrix};

    const WS: StepScheduler = StepScheduler {
        effective_after: 50,
        step: 40,
        factor: 0.01,
    };

    fn scalar_net(theta: f64) -> MlpNetwork {
        let layer = DenseLayer::new(
            LayerParams {
                weights: Matrix::from_vec(1, 1, vec![theta]).unwrap(),
                bias: vec![0.0],
            },
            Activation::Identity,
        )
        .unwrap();
        MlpNetwork::from_layers(vec![layer]).unwrap()
    }

    fn scalar_grad(g: f64) -> ParamSet {
        ParamSet::new(vec![LayerParams {
            weights: Matrix::from_vec(1, 1, vec![g]).unwrap(),
            bias: vec![0.0],
        }])
    }

    #[test]
    fn sgd_arithmetic() {
        let mut net = scalar_net(1.0);
        OptimizerState::new(0.1, 0.0, WS)
            .unwrap()
            .sgd_step(&mut net, &scalar_grad(1.0))
            .unwrap();
        assert!((net.param(0) - 0.9).abs() < 1e-15);

        let mut net = scalar_net(1.0);
        OptimizerState::new(0.1, 1e-4, WS)
            .unwrap()
            .sgd_step(&mut net, &scalar_grad(0.0))
            .unwrap();
        assert!((net.param(0) - 0.99999).abs() < 1e-15);

        let mut net = scalar_net(1.0);
        let before = net.clone();
        OptimizerState::new(0.1, 0.0, WS)
            .unwrap()
            .sgd_step(&mut net, &scalar_grad(0.0))
            .unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut net = scalar_net(1.0);
        let err = OptimizerState::new(0.1, 0.0, WS)
            .unwrap()
            .sgd_step(&mut net, &scalar_grad(f64::NAN))
            .unwrap_err();
        assert!(matches!(
            err,
            Error::NonFinite {
                what: "gradient",
                index: 0,
                ..
            }
        ));
        assert_eq!(net.param(0), 1.0);
    }

    #[test]
    fn ws_schedule_decays_at_90_130_170() {
        let mut opt = OptimizerState::new(0.01, 1e-4, WS).unwrap();
        let mut fired = Vec::new();
        for _ in 0..200 {
            let lr = opt.learning_rate();
            opt.scheduler_step();
            if opt.learning_rate() != lr {
                fired.push(opt.epoch());
            }
        }
        assert_eq!(fired, vec![90, 130, 170]);
    }

    #[test]
    fn epoch_89_leaves_rate_and_one_decay_is_exact() {
        let mut opt = OptimizerState::new(0.01, 0.0, WS).unwrap();
        for _ in 0..89 {
            opt.scheduler_step();
        }
        assert_eq!(opt.learning_rate(), 0.01);
        opt.scheduler_step();
        assert!((opt.learning_rate() - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(OptimizerState::new(0.0, 0.0, WS).is_err());
        assert!(OptimizerState::new(0.1, -1.0, WS).is_err());
        assert!(OptimizerState::new(0.1, 0.0, StepScheduler { factor: 1.0, ..WS }).is_err());
    }
}
