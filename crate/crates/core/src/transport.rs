//! Conditional transport maps `T_θ(·; y)` and pushforward sampling.
//!
//! Three variants share one network `S_θ`:
//!
//! * `mlp_residual`: `T(p; y) = p + S_θ(p, y)` on vectors;
//! * `operator_baseline`: `T(p; y) = p + S_θ(p; y)` on fields;
//! * `cameron_martin`: `T(p; y) = p + C^{1/2} P S_θ(p; y)`, where `P`
//!   drops the constant mode and every mode above the prior's `k_modes`.
//!
//! With `θ = 0` all three reduce to the identity.

use crate::dataset::{column_moments, JointDataset};
use crate::ensemble::{EnsembleMeta, PosteriorEnsemble, Provenance};
use crate::error::{Error, Result};
use crate::grf::{CosineBasis, CovarianceSpec, PriorSampler};
use crate::nn::{ArchDescriptor, ArchKind, Checkpoint, Network, ParamVector, Tape};
use crate::rng::{component_rng, SimRng};
use crate::scalar::{std_normal, Real};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

pub const PUSHFORWARD_BLOCK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MlpResidual,
    OperatorBaseline,
    CameronMartin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    #[default]
    Prior,
    Joint,
}

/// Affine rescaling of network inputs and outputs.
///
/// The network sees `(p - input_shift) * input_scale` and
/// `(c - cond_shift) / cond_scale`, and its raw output is multiplied by
/// `out_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardization {
    pub input_shift: f64,
    pub input_scale: f64,
    pub cond_shift: Vec<f64>,
    pub cond_scale: Vec<f64>,
    pub out_scale: f64,
}

impl Standardization {
    pub fn identity(cond_dim: usize) -> Self {
        Self {
            input_shift: 0.0,
            input_scale: 1.0,
            cond_shift: vec![0.0; cond_dim],
            cond_scale: vec![1.0; cond_dim],
            out_scale: 1.0,
        }
    }

    /// Scales from the prior and the observation columns of `data`.
    ///
    /// `prior_shift`/`prior_std` describe the reference sample pointwise.
    pub fn fit(
        variant: Variant,
        reference: ReferenceKind,
        prior_shift: f64,
        prior_std: f64,
        data: &JointDataset,
    ) -> Self {
        let (mut shift, std) = column_moments(data.y_flat(), data.d_y());
        let mut scale: Vec<f64> = std.iter().map(|s| if *s > 0.0 { *s } else { 1.0 }).collect();
        if reference == ReferenceKind::Joint {
            shift = shift.iter().chain(&shift).copied().collect();
            scale = scale.iter().chain(&scale).copied().collect();
        }
        Self {
            input_shift: prior_shift,
            input_scale: 1.0 / prior_std,
            cond_shift: shift,
            cond_scale: scale,
            out_scale: match variant {
                Variant::CameronMartin => 1.0,
                _ => prior_std,
            },
        }
    }

    fn validate(&self, cond_dim: usize) -> Result<()> {
        if self.cond_shift.len() != cond_dim || self.cond_scale.len() != cond_dim {
            return Err(Error::LengthMismatch {
                expected: cond_dim,
                got: self.cond_shift.len().min(self.cond_scale.len()),
            });
        }
        let finite = [self.input_shift, self.input_scale, self.out_scale]
            .iter()
            .chain(&self.cond_shift)
            .chain(&self.cond_scale)
            .all(|v| v.is_finite());
        if !finite || self.input_scale == 0.0 || self.cond_scale.iter().any(|s| *s == 0.0) {
            return Err(Error::InvalidParameter("standardization must be finite with nonzero scales".into()));
        }
        Ok(())
    }
}

/// One draw from the reference measure: `p` feeds the map, `q` is the
/// paired observation when the reference is the joint law (empty otherwise).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSample<S> {
    pub p: Vec<S>,
    pub q: Vec<S>,
}

pub trait ReferenceSampler<S>: Send + Sync {
    fn draw(&self, rng: &mut SimRng) -> ReferenceSample<S>;
    fn kind(&self) -> ReferenceKind;
}

/// Scalar `N(mean, std²)`.
#[derive(Debug, Clone)]
pub struct GaussianReference {
    pub mean: f64,
    pub std: f64,
}

impl<S: Real> ReferenceSampler<S> for GaussianReference {
    fn draw(&self, rng: &mut SimRng) -> ReferenceSample<S> {
        let z: f64 = std_normal(rng);
        ReferenceSample {
            p: vec![S::lit(self.mean + self.std * z)],
            q: Vec::new(),
        }
    }

    fn kind(&self) -> ReferenceKind {
        ReferenceKind::Prior
    }
}

/// Gaussian random field prior.
#[derive(Debug, Clone)]
pub struct FieldPriorReference<S> {
    sampler: PriorSampler<S>,
}

impl<S: Real> FieldPriorReference<S> {
    pub fn new(spec: CovarianceSpec<S>, n: usize) -> Result<Self> {
        Ok(Self {
            sampler: PriorSampler::new(spec, n)?,
        })
    }
}

impl<S: Real> ReferenceSampler<S> for FieldPriorReference<S> {
    fn draw(&self, rng: &mut SimRng) -> ReferenceSample<S> {
        ReferenceSample {
            p: self.sampler.sample(rng).into_values(),
            q: Vec::new(),
        }
    }

    fn kind(&self) -> ReferenceKind {
        ReferenceKind::Prior
    }
}

/// Uniform draws of `(u, y)` rows from a held-out joint dataset.
#[derive(Debug, Clone)]
pub struct JointReference<S> {
    u: Vec<Vec<S>>,
    y: Vec<Vec<S>>,
}

impl<S: Real> JointReference<S> {
    pub fn new(data: &JointDataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::MissingReferenceData);
        }
        let conv = |r: &[f64]| r.iter().map(|&v| S::lit(v)).collect::<Vec<S>>();
        Ok(Self {
            u: (0..data.len()).map(|i| conv(data.u_row(i))).collect(),
            y: (0..data.len()).map(|i| conv(data.y_row(i))).collect(),
        })
    }
}

impl<S: Real> ReferenceSampler<S> for JointReference<S> {
    fn draw(&self, rng: &mut SimRng) -> ReferenceSample<S> {
        let i = rng.random_range(0..self.u.len());
        ReferenceSample {
            p: self.u[i].clone(),
            q: self.y[i].clone(),
        }
    }

    fn kind(&self) -> ReferenceKind {
        ReferenceKind::Joint
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportDescriptor {
    pub variant: Variant,
    pub reference: ReferenceKind,
    #[serde(default)]
    pub covariance: Option<CovarianceSpec<f64>>,
    pub standardization: Standardization,
}

/// Recorded forward pass of `T_θ`.
#[derive(Debug, Clone)]
pub struct TransportTape<S> {
    net: Tape<S>,
}

/// `T_θ(·; y)` together with its parameters.
#[derive(Debug)]
pub struct TransportModel<S> {
    variant: Variant,
    reference: ReferenceKind,
    net: Network<S>,
    theta: ParamVector<S>,
    covariance: Option<CovarianceSpec<S>>,
    standardization: Standardization,
    cm_cache: RwLock<HashMap<usize, Arc<(CosineBasis<S>, Vec<S>)>>>,
}

impl<S: Real> Clone for TransportModel<S> {
    fn clone(&self) -> Self {
        Self {
            variant: self.variant,
            reference: self.reference,
            net: self.net.clone(),
            theta: self.theta.clone(),
            covariance: self.covariance.clone(),
            standardization: self.standardization.clone(),
            cm_cache: RwLock::new(self.cm_cache.read().expect("cache").clone()),
        }
    }
}

fn spec_to<S: Real, T: Real>(c: &CovarianceSpec<T>) -> Result<CovarianceSpec<S>> {
    CovarianceSpec::new(
        S::lit(c.sigma.to_f64_lossy()),
        S::lit(c.tau.to_f64_lossy()),
        S::lit(c.alpha.to_f64_lossy()),
        c.k_modes,
    )
}

impl<S: Real> TransportModel<S> {
    /// Builds a model with `θ = 0`, i.e. the identity map.
    pub fn new(
        variant: Variant,
        reference: ReferenceKind,
        arch: ArchDescriptor,
        covariance: Option<CovarianceSpec<S>>,
        standardization: Standardization,
    ) -> Result<Self> {
        match (variant, arch.kind) {
            (Variant::MlpResidual, ArchKind::Mlp) => {
                if arch.input_dim != arch.output_dim {
                    return Err(Error::InvalidParameter(
                        "mlp_residual needs equal input and output dims".into(),
                    ));
                }
            }
            (Variant::OperatorBaseline | Variant::CameronMartin, ArchKind::DctOperator) => {}
            (v, k) => {
                return Err(Error::InvalidParameter(format!("variant {v:?} is incompatible with arch {k:?}")));
            }
        }
        if variant == Variant::CameronMartin {
            match &covariance {
                Some(c) => c.validate()?,
                None => {
                    return Err(Error::InvalidParameter("cameron_martin requires a covariance spec".into()));
                }
            }
        }
        standardization.validate(arch.cond_dim)?;
        let net = Network::new(arch)?;
        let theta = net.zero_params();
        Ok(Self {
            variant,
            reference,
            net,
            theta,
            covariance,
            standardization,
            cm_cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn reference(&self) -> ReferenceKind {
        self.reference
    }

    pub fn arch(&self) -> &ArchDescriptor {
        self.net.arch()
    }

    pub fn network(&self) -> &Network<S> {
        &self.net
    }

    pub fn theta(&self) -> &ParamVector<S> {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut ParamVector<S> {
        &mut self.theta
    }

    pub fn covariance(&self) -> Option<&CovarianceSpec<S>> {
        self.covariance.as_ref()
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    pub fn init_params<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.theta = self.net.init_params(rng);
    }

    pub fn set_params(&mut self, values: &[S]) -> Result<()> {
        if values.len() != self.theta.len() {
            return Err(Error::LengthMismatch {
                expected: self.theta.len(),
                got: values.len(),
            });
        }
        self.theta.as_mut_slice().copy_from_slice(values);
        Ok(())
    }

    /// Weight `w` of the norm `√(w Σ v²)` on the parameter space:
    /// `1` for vectors, `1/n` for fields.
    pub fn norm_weight(&self, dim: usize) -> S {
        match self.variant {
            Variant::MlpResidual => S::one(),
            _ => S::one() / S::from_usize_lossy(dim),
        }
    }

    fn cm_operator(&self, n: usize) -> Result<Arc<(CosineBasis<S>, Vec<S>)>> {
        if let Some(c) = self.cm_cache.read().expect("cache").get(&n) {
            return Ok(c.clone());
        }
        let spec = self.covariance.as_ref().ok_or(Error::InvalidParameter("no covariance".into()))?;
        spec.check_grid(n)?;
        let entry = Arc::new((CosineBasis::new(n, spec.k_modes)?, spec.sqrt_eigenvalues()));
        self.cm_cache.write().expect("cache").insert(n, entry.clone());
        Ok(entry)
    }

    /// `C^{1/2} P v`: drop the constant mode, keep modes `1..=k_modes` scaled by `√λ_k`.
    fn apply_cm(&self, v: &[S]) -> Result<Vec<S>> {
        let op = self.cm_operator(v.len())?;
        let (basis, sqrt_l) = (&op.0, &op.1);
        let mut coeffs = vec![S::zero(); sqrt_l.len() + 1];
        for (k, s) in sqrt_l.iter().enumerate() {
            coeffs[k + 1] = *s * basis.coefficient(v, k + 1);
        }
        let mut out = vec![S::zero(); v.len()];
        basis.synthesize_into(&coeffs, &mut out)?;
        Ok(out)
    }

    /// `P v`: the network output with the constant mode and modes above
    /// `k_modes` removed.
    pub fn strip(&self, v: &[S]) -> Result<Vec<S>> {
        let op = self.cm_operator(v.len())?;
        let basis = &op.0;
        let mut coeffs = vec![S::zero(); basis.k_max() + 1];
        for (k, c) in coeffs.iter_mut().enumerate().skip(1) {
            *c = basis.coefficient(v, k);
        }
        let mut out = vec![S::zero(); v.len()];
        basis.synthesize_into(&coeffs, &mut out)?;
        Ok(out)
    }

    fn check_sample(&self, r: &ReferenceSample<S>, y: &[S]) -> Result<()> {
        let d_q = if self.reference == ReferenceKind::Joint { y.len() } else { 0 };
        if r.q.len() != d_q {
            return Err(Error::LengthMismatch {
                expected: d_q,
                got: r.q.len(),
            });
        }
        if r.q.len() + y.len() != self.arch().cond_dim {
            return Err(Error::LengthMismatch {
                expected: self.arch().cond_dim,
                got: r.q.len() + y.len(),
            });
        }
        if r.p.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("transport input".into()));
        }
        Ok(())
    }

    fn net_inputs(&self, r: &ReferenceSample<S>, y: &[S]) -> (Vec<S>, Vec<S>) {
        let st = &self.standardization;
        let shift = S::lit(st.input_shift);
        let scale = S::lit(st.input_scale);
        let input = r.p.iter().map(|&p| (p - shift) * scale).collect();
        let cond = r
            .q
            .iter()
            .chain(y)
            .zip(st.cond_shift.iter().zip(&st.cond_scale))
            .map(|(&c, (&m, &s))| (c - S::lit(m)) / S::lit(s))
            .collect();
        (input, cond)
    }

    /// Scaled network output `out_scale · S_θ(p; y)` before any projection.
    pub fn perturbation(&self, r: &ReferenceSample<S>, y: &[S]) -> Result<Vec<S>> {
        self.check_sample(r, y)?;
        let (input, cond) = self.net_inputs(r, y);
        let raw = self.net.forward(&self.theta, &input, &cond)?;
        let scale = S::lit(self.standardization.out_scale);
        Ok(raw.into_iter().map(|v| v * scale).collect())
    }

    fn finish(&self, p: &[S], s: Vec<S>) -> Result<Vec<S>> {
        let shift = match self.variant {
            Variant::CameronMartin => self.apply_cm(&s)?,
            _ => s,
        };
        if shift.len() != p.len() {
            return Err(Error::LengthMismatch {
                expected: p.len(),
                got: shift.len(),
            });
        }
        Ok(p.iter().zip(&shift).map(|(&a, &b)| a + b).collect())
    }

    pub fn apply(&self, r: &ReferenceSample<S>, y: &[S]) -> Result<Vec<S>> {
        let s = self.perturbation(r, y)?;
        self.finish(&r.p, s)
    }

    pub fn forward_tape(&self, r: &ReferenceSample<S>, y: &[S]) -> Result<(Vec<S>, TransportTape<S>)> {
        self.check_sample(r, y)?;
        let (input, cond) = self.net_inputs(r, y);
        let (raw, tape) = self.net.forward_tape(&self.theta, &input, &cond)?;
        let scale = S::lit(self.standardization.out_scale);
        let s = raw.into_iter().map(|v| v * scale).collect();
        Ok((self.finish(&r.p, s)?, TransportTape { net: tape }))
    }

    /// Accumulates `(∂T/∂θ)ᵀ d_t` into `grad`.
    pub fn backward(&self, tape: &TransportTape<S>, d_t: &[S], grad: &mut [S]) -> Result<()> {
        let d_s = match self.variant {
            Variant::CameronMartin => self.apply_cm(d_t)?,
            _ => d_t.to_vec(),
        };
        let scale = S::lit(self.standardization.out_scale);
        let d_raw: Vec<S> = d_s.into_iter().map(|v| v * scale).collect();
        self.net.backward(&self.theta, &tape.net, &d_raw, grad)
    }

    pub fn descriptor(&self) -> TransportDescriptor {
        TransportDescriptor {
            variant: self.variant,
            reference: self.reference,
            covariance: self.covariance.as_ref().map(|c| spec_to::<f64, S>(c).expect("valid spec")),
            standardization: self.standardization.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut descriptor = serde_json::to_value(self.arch())?;
        descriptor
            .as_object_mut()
            .expect("arch serializes to an object")
            .insert("transport".into(), serde_json::to_value(self.descriptor())?);
        Ok(Checkpoint {
            descriptor,
            params: self.theta.as_slice().iter().map(|v| v.to_f64_lossy()).collect(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut desc = ck.descriptor.clone();
        let transport = desc
            .as_object_mut()
            .and_then(|o| o.remove("transport"))
            .ok_or_else(|| Error::InvalidParameter("checkpoint descriptor has no transport section".into()))?;
        let arch: ArchDescriptor = serde_json::from_value(desc)?;
        let t: TransportDescriptor = serde_json::from_value(transport)?;
        let cov = t.covariance.as_ref().map(spec_to::<S, f64>).transpose()?;
        let mut model = Self::new(t.variant, t.reference, arch, cov, t.standardization)?;
        let params: Vec<S> = ck.params.iter().map(|&v| S::lit(v)).collect();
        model.set_params(&params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Maps `m` reference draws through `T_θ(·; y†)`.
///
/// Block `b` of [`PUSHFORWARD_BLOCK`] samples uses a generator seeded by
/// `seed + b`; the output does not depend on the number of threads.
pub fn pushforward<S: Real>(
    model: &TransportModel<S>,
    y_dagger: &[S],
    m: usize,
    sampler: &dyn ReferenceSampler<S>,
    seed: u64,
) -> Result<PosteriorEnsemble<S>> {
    if m == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    if sampler.kind() != model.reference() {
        return Err(Error::InvalidParameter(format!(
            "model expects a {:?} reference, sampler provides {:?}",
            model.reference(),
            sampler.kind()
        )));
    }
    let blocks: Vec<Result<Vec<Vec<S>>>> = (0..m.div_ceil(PUSHFORWARD_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut rng = component_rng(seed.wrapping_add(b as u64), "pushforward");
            let count = PUSHFORWARD_BLOCK.min(m - b * PUSHFORWARD_BLOCK);
            (0..count)
                .map(|_| model.apply(&sampler.draw(&mut rng), y_dagger))
                .collect()
        })
        .collect();
    let mut samples = Vec::with_capacity(m);
    for b in blocks {
        samples.extend(b?);
    }
    PosteriorEnsemble::new(
        samples,
        EnsembleMeta {
            provenance: Provenance::Pushforward,
            y_dagger: y_dagger.iter().map(|v| v.to_f64_lossy()).collect(),
            seed,
            info: serde_json::json!({ "variant": model.variant(), "reference": model.reference() }),
        },
    )
}
