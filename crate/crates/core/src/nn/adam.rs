use super::ParamVector;
use crate::error::{Error, Result};
use crate::scalar::Real;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epoch (0-based) from which the learning rate is multiplied by `decay_factor`.
    pub decay_epoch: Option<usize>,
    /// Optimizer step (0-based) from which the learning rate is multiplied by `decay_factor`.
    pub decay_step: Option<u64>,
    pub decay_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_epoch: None,
            decay_step: None,
            decay_factor: 0.1,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.decay_factor > 0.0;
        if !ok {
            return Err(Error::InvalidParameter(format!("invalid optimizer config {self:?}")));
        }
        Ok(())
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        self.lr_at(epoch, 0)
    }

    /// Learning rate at `epoch` for the update following `step` completed steps.
    /// Each triggered decay rule applies `decay_factor` once.
    pub fn lr_at(&self, epoch: usize, step: u64) -> f64 {
        let mut lr = self.lr;
        if self.decay_epoch.is_some_and(|e| epoch >= e) {
            lr *= self.decay_factor;
        }
        if self.decay_step.is_some_and(|s| step >= s) {
            lr *= self.decay_factor;
        }
        lr
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<S> {
    config: AdamConfig,
    epoch: usize,
    m: Vec<S>,
    v: Vec<S>,
    step: u64,
}

impl<S: Real> AdamState<S> {
    pub fn new(config: AdamConfig, n_params: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            epoch: 0,
            config,
            m: vec![S::zero(); n_params],
            v: vec![S::zero(); n_params],
            step: 0,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Learning rate of the next update.
    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.epoch, self.step)
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    /// One bias-corrected Adam update. A non-finite gradient leaves `theta`
    /// and the moments untouched.
    pub fn step(&mut self, theta: &mut ParamVector<S>, grad: &[S]) -> Result<()> {
        if grad.len() != theta.len() || grad.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                expected: self.m.len(),
                got: grad.len(),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { step: self.step + 1 });
        }
        let lr = S::lit(self.lr());
        self.step += 1;
        let b1 = S::lit(self.config.beta1);
        let b2 = S::lit(self.config.beta2);
        let t = self.step as i32;
        let c1 = S::one() - S::lit(self.config.beta1.powi(t));
        let c2 = S::one() - S::lit(self.config.beta2.powi(t));
        let eps = S::lit(self.config.eps);
        let values = theta.as_mut_slice();
        for i in 0..values.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (S::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (S::one() - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            values[i] -= lr * mh / (vh.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchDescriptor, ParamLayout};

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let layout = ParamLayout::for_arch(&ArchDescriptor::mlp(1, 0, 1, 0, 0));
        let mut theta = ParamVector::<f64>::from_values(layout, vec![1.0, -2.0]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), 2).unwrap();
        adam.step(&mut theta, &[3.0, -0.5]).unwrap();
        assert!((theta.as_slice()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((theta.as_slice()[1] - (-2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimises_a_quadratic() {
        let layout = ParamLayout::for_arch(&ArchDescriptor::mlp(1, 0, 1, 0, 0));
        let mut theta = ParamVector::<f64>::from_values(layout, vec![5.0, -3.0]).unwrap();
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        let mut adam = AdamState::new(cfg, 2).unwrap();
        for _ in 0..2000 {
            let g: Vec<f64> = theta.as_slice().iter().map(|x| 2.0 * (x - 1.0)).collect();
            adam.step(&mut theta, &g).unwrap();
        }
        assert!(theta.as_slice().iter().all(|x| (x - 1.0).abs() < 1e-3));
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let layout = ParamLayout::for_arch(&ArchDescriptor::mlp(1, 0, 1, 0, 0));
        let mut theta = ParamVector::<f64>::from_values(layout, vec![0.0, 0.0]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), 2).unwrap();
        adam.step(&mut theta, &[1.0, 1.0]).unwrap();
        let before = theta.as_slice().to_vec();
        let err = adam.step(&mut theta, &[f64::NAN, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { step: 2 }));
        assert_eq!(theta.as_slice(), &before[..]);
    }

    #[test]
    fn decay_applies_from_trigger_epoch() {
        let cfg = AdamConfig { decay_epoch: Some(3), ..Default::default() };
        assert_eq!(cfg.lr_for_epoch(2), 1e-3);
        assert!((cfg.lr_for_epoch(3) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn step_decay_applies_after_trigger_step() {
        let cfg = AdamConfig { decay_step: Some(2), ..Default::default() };
        let mut adam = AdamState::<f64>::new(cfg, 2).unwrap();
        let layout = ParamLayout::for_arch(&ArchDescriptor::mlp(1, 0, 1, 0, 0));
        let mut theta = ParamVector::<f64>::from_values(layout, vec![0.0, 0.0]).unwrap();
        let mut lrs = Vec::new();
        for _ in 0..4 {
            lrs.push(adam.lr());
            adam.step(&mut theta, &[1.0, 1.0]).unwrap();
        }
        assert_eq!(lrs[..2], [1e-3, 1e-3]);
        assert!((lrs[2] - 1e-4).abs() < 1e-18 && (lrs[3] - 1e-4).abs() < 1e-18);
        let both = AdamConfig { decay_epoch: Some(1), decay_step: Some(0), ..Default::default() };
        assert!((both.lr_at(1, 0) - 1e-5).abs() < 1e-18);
    }
}
