use crate::dataset::{GenerateConfig, JointDataset, PriorConfig};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamConfig, AdamState, ArchDescriptor};
use crate::objective::{minibatch_loss_and_grad, LossConfig};
use crate::rng::component_rng;
use crate::scalar::Real;
use crate::transport::{
    FieldPriorReference, GaussianReference, JointReference, ReferenceKind, ReferenceSample, ReferenceSampler,
    Standardization, TransportModel, Variant,
};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub m: usize,
    pub norm_eps: f64,
    pub adam: AdamConfig,
    /// Stops after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    /// Keeps the current parameters instead of drawing a fresh initialization.
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        Self {
            epochs: 30,
            batch_size: loss.batch_size,
            m: loss.m,
            norm_eps: loss.norm_eps,
            adam: AdamConfig::default(),
            max_steps: None,
            warm_start: false,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            m: self.m,
            batch_size: self.batch_size,
            norm_eps: self.norm_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss().validate()?;
        self.adam.validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be positive".into()));
        }
        Ok(())
    }
}

fn default_activation() -> Activation {
    Activation::Gelu
}

/// Network and transport choices for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    #[serde(default)]
    pub reference: ReferenceKind,
    pub depth: usize,
    pub width: usize,
    /// Spectral modes per operator block; ignored by the MLP.
    #[serde(default)]
    pub k_modes: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

impl ModelConfig {
    pub fn mlp(depth: usize, width: usize) -> Self {
        Self {
            variant: Variant::MlpResidual,
            reference: ReferenceKind::Prior,
            depth,
            width,
            k_modes: 0,
            activation: default_activation(),
        }
    }

    pub fn operator(variant: Variant, depth: usize, width: usize, k_modes: usize) -> Self {
        Self {
            variant,
            reference: ReferenceKind::Prior,
            depth,
            width,
            k_modes,
            activation: default_activation(),
        }
    }

    pub fn with_reference(mut self, reference: ReferenceKind) -> Self {
        self.reference = reference;
        self
    }

    /// Builds an identity-initialized model for `gen`, with standardization fitted on `data`.
    pub fn build(&self, gen: &GenerateConfig, data: &JointDataset) -> Result<TransportModel<f64>> {
        let d_y = gen.d_y();
        let cond_dim = match self.reference {
            ReferenceKind::Prior => d_y,
            ReferenceKind::Joint => 2 * d_y,
        };
        let arch = match self.variant {
            Variant::MlpResidual => {
                let d_u = gen.d_u();
                ArchDescriptor::mlp(d_u, cond_dim, d_u, self.depth, self.width)
            }
            Variant::OperatorBaseline | Variant::CameronMartin => {
                ArchDescriptor::dct_operator(cond_dim, self.depth, self.width, self.k_modes)
            }
        }
        .with_activation(self.activation);
        let (shift, std) = prior_pointwise(&gen.prior);
        let standardization = Standardization::fit(self.variant, self.reference, shift, std, data);
        TransportModel::new(
            self.variant,
            self.reference,
            arch,
            gen.prior.covariance().cloned(),
            standardization,
        )
    }
}

/// Pointwise prior mean and standard deviation.
pub fn prior_pointwise(prior: &PriorConfig) -> (f64, f64) {
    match prior {
        PriorConfig::Scalar { mean, std } => (*mean, *std),
        PriorConfig::Field { covariance } => (0.0, covariance.eigenvalues().iter().sum::<f64>().sqrt()),
    }
}

/// Reference sampler matching `reference`; the joint kind draws rows of `joint_data`.
pub fn reference_sampler(
    gen: &GenerateConfig,
    reference: ReferenceKind,
    joint_data: Option<&JointDataset>,
) -> Result<Box<dyn ReferenceSampler<f64>>> {
    Ok(match reference {
        ReferenceKind::Joint => Box::new(JointReference::new(joint_data.ok_or(Error::MissingReferenceData)?)?),
        ReferenceKind::Prior => match &gen.prior {
            PriorConfig::Scalar { mean, std } => Box::new(GaussianReference { mean: *mean, std: *std }),
            PriorConfig::Field { covariance } => Box::new(FieldPriorReference::new(*covariance, gen.d_u())?),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub final_loss: f64,
}

/// Minimizes the minibatch energy-score loss with Adam.
///
/// Randomness: parameter init from component `init`, epoch `e` shuffles
/// with seed `seed + e` (component `shuffle`), reference draws from one
/// stream (component `reference`).
pub fn train<S: Real>(
    model: &mut TransportModel<S>,
    data: &JointDataset,
    reference: &dyn ReferenceSampler<S>,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    if reference.kind() != model.reference() {
        return Err(Error::InvalidParameter("reference sampler does not match the model".into()));
    }
    if !cfg.warm_start {
        model.init_params(&mut component_rng(seed, "init"));
    }
    let conv = |r: &[f64]| r.iter().map(|&v| S::lit(v)).collect::<Vec<S>>();
    let u_rows: Vec<Vec<S>> = (0..data.len()).map(|i| conv(data.u_row(i))).collect();
    let y_rows: Vec<Vec<S>> = (0..data.len()).map(|i| conv(data.y_row(i))).collect();

    let mut adam = AdamState::new(cfg.adam.clone(), model.theta().len())?;
    let mut ref_rng = component_rng(seed, "reference");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::new();
    let mut steps = 0u64;
    'epochs: for epoch in 0..cfg.epochs {
        adam.set_epoch(epoch);
        order.shuffle(&mut component_rng(seed.wrapping_add(epoch as u64), "shuffle"));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<Vec<ReferenceSample<S>>> = chunk
                .iter()
                .map(|_| (0..cfg.m).map(|_| reference.draw(&mut ref_rng)).collect())
                .collect();
            let u: Vec<&[S]> = chunk.iter().map(|&i| u_rows[i].as_slice()).collect();
            let y: Vec<&[S]> = chunk.iter().map(|&i| y_rows[i].as_slice()).collect();
            let (loss, grad) = minibatch_loss_and_grad(model, &u, &y, &refs, cfg.norm_eps)?;
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("loss {loss} at step {}", steps + 1)));
            }
            adam.step(model.theta_mut(), &grad)?;
            total += loss;
            batches += 1;
            steps += 1;
            if cfg.max_steps.is_some_and(|s| steps >= s) {
                epoch_losses.push(total / batches as f64);
                on_epoch(epoch, total / batches as f64);
                break 'epochs;
            }
        }
        let mean = total / batches as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(TrainReport {
        final_loss: *epoch_losses.last().expect("at least one epoch"),
        epoch_losses,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, GenerateConfig};
    use crate::nn::ArchDescriptor;
    use crate::transport::{GaussianReference, ReferenceKind, Standardization, Variant};

    fn model() -> TransportModel<f64> {
        TransportModel::new(
            Variant::MlpResidual,
            ReferenceKind::Prior,
            ArchDescriptor::mlp(1, 1, 1, 2, 16),
            None,
            Standardization::identity(1),
        )
        .unwrap()
    }

    #[test]
    fn training_is_reproducible_and_reduces_loss() {
        let data = generate(&GenerateConfig::exp1(), 2000, 1).unwrap();
        let reference = GaussianReference { mean: 0.0, std: 1.0 };
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 64,
            adam: AdamConfig { lr: 3e-3, ..Default::default() },
            ..Default::default()
        };
        let mut a = model();
        let ra = train(&mut a, &data, &reference, &cfg, 5, |_, _| {}).unwrap();
        let mut b = model();
        let rb = train(&mut b, &data, &reference, &cfg, 5, |_, _| {}).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.theta().as_slice(), b.theta().as_slice());
        assert!(ra.epoch_losses.last().unwrap() < &ra.epoch_losses[0], "{:?}", ra.epoch_losses);
        assert_eq!(ra.steps, 6 * 2000u64.div_ceil(64));
    }

    #[test]
    fn max_steps_stops_early() {
        let data = generate(&GenerateConfig::exp1(), 100, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 10,
            max_steps: Some(15),
            ..Default::default()
        };
        let mut m = model();
        let r = train(&mut m, &data, &GaussianReference { mean: 0.0, std: 1.0 }, &cfg, 0, |_, _| {}).unwrap();
        assert_eq!(r.steps, 15);
        assert_eq!(r.epoch_losses.len(), 2);
    }

    #[test]
    fn model_config_builds_each_variant() {
        let data = generate(&GenerateConfig::exp1(), 50, 2).unwrap();
        let m = ModelConfig::mlp(2, 8).build(&GenerateConfig::exp1(), &data).unwrap();
        assert_eq!(m.arch().cond_dim, 1);
        let j = ModelConfig::mlp(2, 8)
            .with_reference(ReferenceKind::Joint)
            .build(&GenerateConfig::exp1(), &data)
            .unwrap();
        assert_eq!(j.arch().cond_dim, 2);
        assert!(reference_sampler(&GenerateConfig::exp1(), ReferenceKind::Joint, None).is_err());

        let gen = GenerateConfig::exp2();
        let u = vec![0.0; 3 * gen.d_u()];
        let y: Vec<f64> = (0..3 * gen.d_y()).map(|i| i as f64).collect();
        let fd = JointDataset::new(u, gen.d_u(), y, gen.d_y()).unwrap();
        for v in [Variant::CameronMartin, Variant::OperatorBaseline] {
            let m = ModelConfig::operator(v, 2, 4, 4).build(&gen, &fd).unwrap();
            assert_eq!(m.arch().cond_dim, gen.d_y());
        }
    }

    #[test]
    fn rejects_bad_config() {
        let data = generate(&GenerateConfig::exp1(), 10, 1).unwrap();
        let cfg = TrainConfig { m: 1, ..Default::default() };
        let mut m = model();
        assert!(train(&mut m, &data, &GaussianReference { mean: 0.0, std: 1.0 }, &cfg, 0, |_, _| {}).is_err());
    }
}
