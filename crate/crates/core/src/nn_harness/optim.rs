//! SGD with momentum, L2 weight decay and a milestone learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::mlp::{ForwardCache, Gradients, Matrix, Mlp, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Decay points as fractions of the total epoch count, strictly
    /// increasing inside `(0, 1)`.
    pub milestones: Vec<f64>,
    pub decay_factor: f64,
    pub batch_size: usize,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![0.625, 0.75, 0.875],
            decay_factor: 0.1,
            batch_size: 64,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidOptimizer(msg));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return bad(format!("decay_factor must be positive, got {}", self.decay_factor));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.milestones.iter().any(|m| !(*m > 0.0 && *m < 1.0)) {
            return bad(format!("milestones must lie in (0, 1), got {:?}", self.milestones));
        }
        if self.milestones.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("milestones must increase strictly, got {:?}", self.milestones));
        }
        Ok(())
    }

    /// Epoch indices (0-based) at which the learning rate drops.
    pub fn milestone_epochs(&self, total_epochs: usize) -> Vec<usize> {
        self.milestones
            .iter()
            .map(|m| (m * total_epochs as f64).round() as usize)
            .collect()
    }

    /// `lr · decay_factor^(milestones passed)` for the 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        let passed = self
            .milestone_epochs(total_epochs)
            .iter()
            .filter(|&&m| epoch >= m)
            .count();
        self.lr * self.decay_factor.powi(passed as i32)
    }
}

/// Optimizer state: one velocity buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct SgdMomentum<T> {
    spec: OptimizerSpec,
    total_epochs: usize,
    velocity: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> SgdMomentum<T> {
    pub fn new(spec: &OptimizerSpec, model: &Mlp<T>, total_epochs: usize) -> Result<Self> {
        spec.validate()?;
        let velocity = model
            .layers()
            .iter()
            .map(|l| (vec![T::zero(); l.weights.len()], vec![T::zero(); l.bias.len()]))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            total_epochs,
            velocity,
        })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    /// `v ← μv + g + wd·θ;  θ ← θ − lr(epoch)·v`.
    pub fn step(&mut self, model: &mut Mlp<T>, grads: &Gradients<T>, epoch: usize) -> Result<()> {
        if grads.layers.len() != self.velocity.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} layer gradients", self.velocity.len()),
                got: format!("{}", grads.layers.len()),
            });
        }
        let lr = T::from_f64(self.spec.lr_at(epoch, self.total_epochs));
        let mu = T::from_f64(self.spec.momentum);
        let wd = T::from_f64(self.spec.weight_decay);
        for ((layer, (gw, gb)), (vw, vb)) in model
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.velocity)
        {
            if gw.len() != vw.len() || gb.len() != vb.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}+{} parameters", vw.len(), vb.len()),
                    got: format!("{}+{}", gw.len(), gb.len()),
                });
            }
            for ((p, g), v) in layer.weights.iter_mut().zip(gw).zip(vw.iter_mut()) {
                *v = mu * *v + *g + wd * *p;
                *p = *p - lr * *v;
            }
            for ((p, g), v) in layer.bias.iter_mut().zip(gb).zip(vb.iter_mut()) {
                *v = mu * *v + *g + wd * *p;
                *p = *p - lr * *v;
            }
        }
        Ok(())
    }
}

/// Back-propagates `grad_logits` and applies one optimizer step.
pub fn backward_and_step<T: Real>(
    model: &mut Mlp<T>,
    cache: &ForwardCache<T>,
    grad_logits: &Matrix<T>,
    optimizer: &mut SgdMomentum<T>,
    epoch: usize,
) -> Result<()> {
    let grads = model.backward(cache, grad_logits)?;
    optimizer.step(model, &grads, epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_harness::mlp::{Activation, MlpSpec};

    #[test]
    fn milestone_schedule_matches_long_run() {
        let spec = OptimizerSpec::default();
        assert_eq!(spec.milestone_epochs(240), vec![150, 180, 210]);
        let lr = |e| spec.lr_at(e, 240);
        assert_eq!(lr(0), 0.05);
        assert_eq!(lr(149), 0.05);
        assert!((lr(150) - 0.005).abs() < 1e-15);
        assert!((lr(180) - 0.0005).abs() < 1e-15);
        assert!((lr(239) - 0.00005).abs() < 1e-15);
    }

    #[test]
    fn schedule_is_piecewise_constant_with_one_drop_per_milestone() {
        let spec = OptimizerSpec::default();
        for total in [8, 40, 60, 240] {
            let lrs: Vec<f64> = (0..total).map(|e| spec.lr_at(e, total)).collect();
            assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
            let drops = lrs.windows(2).filter(|w| w[1] < w[0]).count();
            assert_eq!(drops, spec.milestones.len(), "total {total}");
        }
    }

    #[test]
    fn validation() {
        let mut s = OptimizerSpec::default();
        assert!(s.validate().is_ok());
        s.milestones = vec![0.5, 0.5];
        assert!(s.validate().is_err());
        s.milestones = vec![0.0];
        assert!(s.validate().is_err());
        let s = OptimizerSpec { momentum: 1.0, ..OptimizerSpec::default() };
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let spec = MlpSpec::new(vec![3, 5, 2], Activation::Relu, 1);
        let mut model = Mlp::<f32>::init(&spec).unwrap();
        let before = model.clone();
        let opt = OptimizerSpec { weight_decay: 0.0, ..OptimizerSpec::default() };
        let mut sgd = SgdMomentum::new(&opt, &model, 10).unwrap();
        let x = Matrix::from_rows(&[vec![0.1f32, 0.2, 0.3]]).unwrap();
        let cache = model.forward_cached(&x).unwrap();
        for epoch in 0..3 {
            backward_and_step(&mut model, &cache, &Matrix::zeros(1, 2), &mut sgd, epoch).unwrap();
        }
        assert_eq!(model, before);
    }

    #[test]
    fn momentum_accumulates() {
        let spec = MlpSpec::new(vec![1, 1], Activation::Relu, 1);
        let mut model = Mlp::<f64>::from_parameters(&spec, &[0.0, 0.0]).unwrap();
        let opt = OptimizerSpec { lr: 0.1, momentum: 0.5, weight_decay: 0.0, milestones: vec![], ..OptimizerSpec::default() };
        let mut sgd = SgdMomentum::new(&opt, &model, 1).unwrap();
        let g = Gradients { layers: vec![(vec![1.0], vec![0.0])] };
        sgd.step(&mut model, &g, 0).unwrap();
        sgd.step(&mut model, &g, 0).unwrap();
        // v1 = 1, v2 = 1.5; θ = −0.1 − 0.15
        assert!((model.parameters()[0] + 0.25).abs() < 1e-15);
    }
}
